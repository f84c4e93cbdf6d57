#!/usr/bin/env python3
"""Regenerate docs/reference_run.json.

The file records the synthetic end-to-end outcome behind the headline
thresholds (discrepancy halving, overlap gain, drift-vs-w trend, loss
trend, linear-baseline comparison). Training and evaluation are
deterministic, bit-reproducible across backends and thread counts, so a
regenerated file diffing against the committed one signals a behavior
change worth explaining.

Usage: python scripts/make_reference_run.py [--out docs/reference_run.json]
"""

import argparse
import json
from pathlib import Path

import numpy as np

import kalign
from kalign import _core
from kalign.adapter import AdapterParams, drift, forward_batch, identity_params
from kalign.evaluation import kernel_discrepancy, neighborhood_overlap
from kalign.kernels import KernelSpec, kernel_matrix
from kalign.objective import k1_from_params, projection_fit
from kalign.store import EmbeddingSet, PairedEmbeddings
from kalign.trainer import TrainConfig, train
from kalign.verify import make_rank_collapsed_corpus


def paired_from(S, T):
    return PairedEmbeddings(EmbeddingSet(data=S), EmbeddingSet(data=T))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="docs/reference_run.json")
    args = ap.parse_args()

    S, T = make_rank_collapsed_corpus()
    paired = paired_from(S, T)
    d = paired.source.d
    k1t = KernelSpec(gamma=1.0 / d)
    k2 = KernelSpec(gamma=1.0 / paired.target.d)

    runs = {w: train(paired, TrainConfig(w=w))
            for w in (0.5, 0.1, 1.0, 10.0, 1e-12)}
    tuned = runs[0.5].final_params
    ident = identity_params(d, log_gamma=float(np.log(1.0 / d)), coef0=1.0)

    before = kernel_discrepancy(paired, ident, k1_from_params(k1t, ident), k2)
    after = kernel_discrepancy(paired, tuned, k1_from_params(k1t, tuned), k2)

    K_target = kernel_matrix(k2, T)
    K_before = kernel_matrix(k1_from_params(k1t, ident), S)
    K_after = kernel_matrix(k1_from_params(k1t, tuned),
                            forward_batch(tuned, S))

    series = np.array([bd.alignment for bd in runs[0.5].history])
    ma = np.convolve(series, np.ones(50) / 50.0, mode="valid")

    Sq, Tq = make_rank_collapsed_corpus(squash_target=True)
    squashed = paired_from(Sq, Tq)
    tuned_sq = train(squashed, TrainConfig()).final_params
    Q = projection_fit(paired_from(Tq, Sq))
    linear = AdapterParams(W=Q - np.eye(d), b=np.zeros(d),
                           log_gamma=float(np.log(1.0 / d)), coef0=1.0)

    payload = {
        "toolkit_version": kalign.__version__,
        "backend": _core.BACKEND,
        "corpus": {"seed": 42, "n": 256, "d": 16, "rank": 8, "noise": 0.05},
        "config": TrainConfig(w=0.5).to_json(),
        "discrepancy": {
            "identity": before.value,
            "trained_w0.5": after.value,
            "ratio": after.value / before.value,
        },
        "neighborhood_overlap_10nn": {
            "identity": neighborhood_overlap(K_before, K_target, k=10),
            "trained_w0.5": neighborhood_overlap(K_after, K_target, k=10),
        },
        "mean_drift_by_w": {
            str(w): float(drift(runs[w].final_params, S).mean())
            for w in (1e-12, 0.1, 0.5, 1.0, 10.0)
        },
        "alignment_ma50_nonincreasing_fraction":
            float(np.mean(np.diff(ma) <= 0.0)),
        "squashed_corpus_discrepancy": {
            "kernel": kernel_discrepancy(
                squashed, tuned_sq, k1_from_params(k1t, tuned_sq), k2).value,
            "linear_baseline": kernel_discrepancy(
                squashed, linear, k1_from_params(k1t, linear), k2).value,
        },
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    print(f"  discrepancy ratio {payload['discrepancy']['ratio']:.4f}, "
          f"ma50 non-increasing "
          f"{payload['alignment_ma50_nonincreasing_fraction']:.1%}")


if __name__ == "__main__":
    main()
