"""Kernel-space embedding alignment toolkit.

Import is kept lightweight (no numpy at package import time) so the CLI
can cap BLAS thread pools before numerical modules load. Submodules:
store, kernels, adapter, objective, trainer, evaluation, verify.
"""

__version__ = "0.1.0"

_LAZY = {
    "EmbeddingSet": "store", "PairedEmbeddings": "store", "PairBatch": "store",
    "KernelSpec": "kernels",
    "AdapterParams": "adapter",
    "TrainConfig": "trainer", "TrainReport": "trainer",
}


def __getattr__(name):
    if name in _LAZY:
        import importlib
        module = importlib.import_module(f".{_LAZY[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
