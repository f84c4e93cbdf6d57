"""Command-line interface: train, eval, verify, inspect.

Exit codes are stable API: 0 success, 2 usage/config error, 3 data
error, 4 numerical abort. Every run that writes outputs also writes a
manifest (config, seed, input checksums, toolkit version, backend)
sufficient to reproduce it byte-for-byte. The thread cap (--threads or
KALIGN_THREADS) is applied to the BLAS pools before numpy loads, which
is why this module defers all numerical imports.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
from pathlib import Path


def _thread_cap_from_argv(argv) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--threads="):
            return arg.split("=", 1)[1]
    return os.environ.get("KALIGN_THREADS")


_cap = _thread_cap_from_argv(sys.argv[1:])
if _cap and _cap.isdigit() and int(_cap) > 0:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[_var] = str(int(_cap))

import click  # noqa: E402

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_threads_option = click.option(
    "--threads", type=click.IntRange(min=1), default=None,
    help="Cap internal data parallelism (default: all cores; "
         "env fallback KALIGN_THREADS). Results do not depend on it.")


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_kemb(path: str):
    from . import store
    p = Path(path)
    if not p.is_file():
        _fail(EXIT_DATA, f"no such file: {path}")
    try:
        return store.load(p)
    except store.StoreError as exc:
        _fail(EXIT_DATA, str(exc))


def _load_adapter_or_identity(adapter_path, d: int):
    from . import adapter as adapter_mod
    if adapter_path is None:
        # Same kernel state the trainer starts from (gamma=1/d, coef0=1),
        # so a no-adapter eval is the before-training baseline.
        return adapter_mod.identity_params(d, log_gamma=math.log(1.0 / d))
    p = Path(adapter_path)
    if not p.is_file():
        _fail(EXIT_DATA, f"no such file: {adapter_path}")
    try:
        params = adapter_mod.load_adapter(p)
    except adapter_mod.AdapterError as exc:
        _fail(EXIT_DATA, str(exc))
    if params.d != d:
        _fail(EXIT_DATA, f"adapter d={params.d} does not match embeddings d={d}")
    return params


def _write_manifest(out: Path, command: str, config: dict, inputs: dict,
                    outputs: list):
    from . import __version__
    from . import _core
    manifest = {
        "toolkit_version": __version__,
        "backend": _core.BACKEND,
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(path), "sha256": _sha256(Path(path))}
                   for name, path in inputs.items()},
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_report(out: Path, payload: dict, fmt: str = "json"):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if fmt == "csv":
        lines = ["metric,value"]
        for key, val in sorted(payload.get("metrics", {}).items()):
            lines.append(f"{key},{val}")
        (out / "report.csv").write_text("\n".join(lines) + "\n")


@click.group()
def main():
    """Kernel-space embedding alignment toolkit."""


@main.command("train")
@click.option("--source", "source_path", required=True,
              type=click.Path(), help="Source embeddings (KEMB).")
@click.option("--target", "target_path", required=True,
              type=click.Path(), help="Target embeddings (KEMB).")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON file mirroring TrainConfig field names.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Output directory (adapter.kadp, train.jsonl, manifest.json).")
@click.option("--seed", type=int, default=None,
              help="Overrides the config seed; the single source of randomness.")
@click.option("--checkpoint-every", type=int, default=0,
              help="Write checkpoint_<step>.kadp every N steps (0 = off).")
@_threads_option
def cmd_train(source_path, target_path, config_path, out_dir, seed,
              checkpoint_every, threads):
    """Fit a residual adapter so source kernel values match the target's."""
    from . import adapter as adapter_mod
    from . import store, trainer

    cfg_obj = {}
    if config_path is not None:
        p = Path(config_path)
        if not p.is_file():
            _fail(EXIT_CONFIG, f"no such config file: {config_path}")
        try:
            cfg_obj = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            _fail(EXIT_CONFIG, f"config is not valid JSON: {exc}")
        if not isinstance(cfg_obj, dict):
            _fail(EXIT_CONFIG, "config must be a JSON object")
    if seed is not None:
        cfg_obj["seed"] = seed
    try:
        config = trainer.TrainConfig.from_json(cfg_obj)
    except (trainer.TrainerError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))

    source = _load_kemb(source_path)
    target = _load_kemb(target_path)
    try:
        paired = store.pair(source, target)
    except store.StoreError as exc:
        _fail(EXIT_DATA, str(exc))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint(step: int, params) -> None:
        if checkpoint_every > 0 and step % checkpoint_every == 0:
            adapter_mod.save_adapter(out / f"checkpoint_{step}.kadp", params)

    report = None
    exit_code = 0
    diagnostic = None
    try:
        report = trainer.train(paired, config,
                               step_callback=checkpoint if checkpoint_every else None)
    except trainer.TrainerError as exc:
        if exc.report is None:
            _fail(EXIT_CONFIG, str(exc))
        report = exc.report
        diagnostic = str(exc)
        exit_code = EXIT_NUMERIC

    with open(out / "train.jsonl", "w") as fh:
        for rec in report.log_records():
            fh.write(json.dumps(rec) + "\n")
    if exit_code == 0:
        adapter_mod.save_adapter(out / "adapter.kadp", report.final_params)
    _write_manifest(out, "train", config.to_json(),
                    {"source": source_path, "target": target_path},
                    ["adapter.kadp", "train.jsonl"])
    if exit_code:
        _fail(exit_code, diagnostic)
    click.echo(f"trained {report.wall_steps} steps; wrote {out / 'adapter.kadp'}")


@main.group("eval")
def cmd_eval():
    """Evaluation protocols over cached embeddings."""


def _eval_common(out_dir, command, metrics_payload, inputs, config, fmt):
    out = Path(out_dir)
    payload = {"command": command, **metrics_payload, "config": config}
    _write_report(out, payload, fmt)
    _write_manifest(out, command, config, inputs, ["report.json"])
    click.echo(json.dumps(metrics_payload.get("metrics", metrics_payload)))


_format_option = click.option("--format", "fmt",
                              type=click.Choice(["json", "csv"]),
                              default="json", help="Report format.")
_adapter_option = click.option("--adapter", "adapter_path", type=click.Path(),
                               default=None,
                               help="Adapter KADP; identity when absent.")


def _anchors_from(path: str):
    from .evaluation import ClassAnchors, EvalError
    aset = _load_kemb(path)
    names = aset.ids if aset.ids is not None else [str(i) for i in range(aset.n)]
    try:
        return ClassAnchors(anchors=aset.data, names=names)
    except EvalError as exc:
        _fail(EXIT_DATA, str(exc))


@cmd_eval.command("zeroshot")
@click.option("--embeddings", "emb_path", required=True, type=click.Path())
@click.option("--anchors", "anchors_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_adapter_option
@_format_option
@_threads_option
def cmd_zeroshot(emb_path, anchors_path, out_dir, adapter_path, fmt, threads):
    """Cosine argmax against class anchors; needs labeled embeddings."""
    from .adapter import forward_batch
    from .evaluation import EvalError, zero_shot_report
    eset = _load_kemb(emb_path)
    if eset.labels is None:
        _fail(EXIT_DATA, f"{emb_path} carries no labels")
    anchors = _anchors_from(anchors_path)
    params = _load_adapter_or_identity(adapter_path, eset.d)
    try:
        report = zero_shot_report(forward_batch(params, eset.data), anchors,
                                  eset.labels)
    except EvalError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    inputs = {"embeddings": emb_path, "anchors": anchors_path}
    if adapter_path:
        inputs["adapter"] = adapter_path
    _eval_common(out_dir, "eval.zeroshot",
                 {"metrics": report.metrics, "per_class": report.per_class},
                 inputs, {"adapter": adapter_path}, fmt)


@cmd_eval.command("retrieval")
@click.option("--queries", "queries_path", required=True, type=click.Path(),
              help="Query side (adapter applies here).")
@click.option("--gallery", "gallery_path", required=True, type=click.Path(),
              help="Gallery side; row i is the true match of query i.")
@click.option("--ks", default="1,5,10", help="Comma-separated K values.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_adapter_option
@_format_option
@_threads_option
def cmd_retrieval(queries_path, gallery_path, ks, out_dir, adapter_path, fmt,
                  threads):
    """R@K retrieval with gallery row i as the match of query i."""
    from .adapter import forward_batch
    from .evaluation import EvalError, retrieval
    queries = _load_kemb(queries_path)
    gallery = _load_kemb(gallery_path)
    try:
        k_list = tuple(int(x) for x in ks.split(","))
    except ValueError:
        _fail(EXIT_CONFIG, f"bad --ks value: {ks!r}")
    params = _load_adapter_or_identity(adapter_path, queries.d)
    try:
        metrics = retrieval(forward_batch(params, queries.data), gallery.data,
                            k_list)
    except EvalError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    inputs = {"queries": queries_path, "gallery": gallery_path}
    if adapter_path:
        inputs["adapter"] = adapter_path
    _eval_common(out_dir, "eval.retrieval", {"metrics": metrics}, inputs,
                 {"adapter": adapter_path, "ks": list(k_list)}, fmt)


@cmd_eval.command("probe")
@click.option("--train", "train_path", required=True, type=click.Path())
@click.option("--test", "test_path", required=True, type=click.Path())
@click.option("--l2", type=float, default=1e-3, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_adapter_option
@_format_option
@_threads_option
def cmd_probe(train_path, test_path, l2, out_dir, adapter_path, fmt, threads):
    """Linear probe on frozen (optionally adapted) embeddings."""
    from .adapter import forward_batch
    from .evaluation import EvalError, linear_probe
    from .store import EmbeddingSet
    tr = _load_kemb(train_path)
    te = _load_kemb(test_path)
    if tr.labels is None or te.labels is None:
        _fail(EXIT_DATA, "probe requires labels on both train and test sets")
    params = _load_adapter_or_identity(adapter_path, tr.d)
    tr_adapted = EmbeddingSet(data=forward_batch(params, tr.data), labels=tr.labels)
    te_adapted = EmbeddingSet(data=forward_batch(params, te.data), labels=te.labels)
    try:
        result = linear_probe(tr_adapted, te_adapted, l2=l2)
    except EvalError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    inputs = {"train": train_path, "test": test_path}
    if adapter_path:
        inputs["adapter"] = adapter_path
    _eval_common(out_dir, "eval.probe",
                 {"metrics": {"accuracy": result.accuracy},
                  "converged": result.converged, "steps": result.steps,
                  "grad_norm": result.grad_norm},
                 inputs, {"adapter": adapter_path, "l2": l2}, fmt)


@cmd_eval.command("discrepancy")
@click.option("--source", "source_path", required=True, type=click.Path())
@click.option("--target", "target_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for sampled mode (n > 4096).")
@_adapter_option
@_format_option
@_threads_option
def cmd_discrepancy(source_path, target_path, out_dir, seed, adapter_path,
                    fmt, threads):
    """Mean squared kernel gap between adapted source and target."""
    from .evaluation import kernel_discrepancy
    from .kernels import KernelError, KernelSpec
    from .objective import k1_from_params
    from .store import StoreError, pair
    source = _load_kemb(source_path)
    target = _load_kemb(target_path)
    try:
        paired = pair(source, target)
    except StoreError as exc:
        _fail(EXIT_DATA, str(exc))
    params = _load_adapter_or_identity(adapter_path, source.d)
    k1 = k1_from_params(KernelSpec(gamma=1.0 / source.d), params)
    k2 = KernelSpec(gamma=1.0 / target.d)
    try:
        result = kernel_discrepancy(paired, params, k1, k2, seed=seed)
    except KernelError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    inputs = {"source": source_path, "target": target_path}
    if adapter_path:
        inputs["adapter"] = adapter_path
    _eval_common(out_dir, "eval.discrepancy",
                 {"metrics": {"kernel_discrepancy": result.value},
                  "mode": result.mode, "standard_error": result.standard_error},
                 inputs,
                 {"adapter": adapter_path, "seed": seed,
                  "k1": k1.to_json(), "k2": k2.to_json()}, fmt)


@cmd_eval.command("drift")
@click.option("--source", "source_path", required=True, type=click.Path())
@click.option("--anchors", "anchors_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_adapter_option
@_format_option
@_threads_option
def cmd_drift(source_path, anchors_path, out_dir, adapter_path, fmt, threads):
    """Anchor-cosine drift against the 2*lambda/max-norm bound."""
    from .evaluation import EvalError, cosine_drift_report
    source = _load_kemb(source_path)
    anchors = _anchors_from(anchors_path)
    params = _load_adapter_or_identity(adapter_path, source.d)
    try:
        report = cosine_drift_report(params, source, anchors)
    except EvalError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    inputs = {"source": source_path, "anchors": anchors_path}
    if adapter_path:
        inputs["adapter"] = adapter_path
    _eval_common(out_dir, "eval.drift",
                 {"metrics": {"mean_drift": float(report.lam.mean()),
                              "max_drift": float(report.lam.max()),
                              "max_cosine_change": report.max_cosine_change,
                              "bound_violations": report.n_violations}},
                 inputs, {"adapter": adapter_path}, fmt)


@main.command("verify")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trials", type=int, default=200, show_default=True,
              help="Gradient-audit trials; other audit budgets scale with it.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Also write report.json here.")
@click.option("--corrupt-block", default=None, hidden=True,
              help="Test fixture: corrupt one analytic gradient block.")
@_threads_option
def cmd_verify(seed, trials, out_dir, corrupt_block, threads):
    """Run the numerical audits; exit 0 iff every gate passes."""
    from . import verify as verify_mod
    if trials < 1:
        _fail(EXIT_CONFIG, f"--trials must be >= 1, got {trials}")
    scale = trials / 200.0
    payload = verify_mod.run_all(
        seed=seed, trials=trials,
        prop2_trials=max(1000, int(100_000 * scale)),
        repeats=200,
        loss_batches=max(100, int(10_000 * scale)),
        corrupt_block=corrupt_block)
    if out_dir is not None:
        _write_report(Path(out_dir), payload)
    click.echo(json.dumps(payload, indent=2, sort_keys=True))
    sys.exit(0 if payload["passed"] else 1)


@main.command("inspect")
@click.argument("path", type=click.Path())
@_threads_option
def cmd_inspect(path, threads):
    """Print KEMB/KADP header fields and checksum status."""
    from . import adapter as adapter_mod
    from . import store
    p = Path(path)
    if not p.is_file():
        _fail(EXIT_DATA, f"no such file: {path}")
    magic = p.read_bytes()[:4]
    if magic == store.MAGIC:
        try:
            eset = store.load(p)
        except store.StoreError as exc:
            _fail(EXIT_DATA, str(exc))
        info = {"format": "KEMB", "version": store.VERSION,
                "n": eset.n, "d": eset.d,
                "labels": eset.labels is not None,
                "ids": eset.ids is not None, "meta": eset.meta,
                "checksum": "ok"}
    elif magic == adapter_mod.MAGIC:
        try:
            params = adapter_mod.load_adapter(p)
        except adapter_mod.AdapterError as exc:
            _fail(EXIT_DATA, str(exc))
        info = {"format": "KADP", "version": adapter_mod.VERSION,
                "d": params.d, "gamma": params.gamma, "coef0": params.coef0,
                "checksum": "ok"}
    else:
        _fail(EXIT_DATA, f"unrecognized magic {magic!r}")
    click.echo(json.dumps(info, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
