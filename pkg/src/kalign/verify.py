"""Numerical audits of the toolkit's mathematical claims.

Four audits, each deterministic given a seed and each emitting a
JSON-ready pass/fail result:

  * gradient_audit: every analytic gradient block vs central finite
    differences, across kernel families and both objectives.
  * concentration_experiment: L2 deviation of the M-pair alignment
    gradient estimator from the exact all-pairs gradient; the fitted
    log-log slope should sit near the -1/2 sampling rate, and the
    mini-batch loss estimator should agree with the exact loss.
  * prop2_audit: the anchor-cosine drift bound 2*lambda/max-norm is a
    theorem; any violation is an implementation bug.
  * kernel_audit: symmetry, normalized range, and PSD floor per spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams
from .kernels import KernelSpec, kernel_matrix, psd_probe
from .objective import (alignment_loss, alignment_loss_and_grad,
                        feature_alignment_loss_and_grad, k1_from_params,
                        total_loss_and_grad)
from .store import EmbeddingSet, PairBatch, PairedEmbeddings

GRAD_TOL = 1e-6
SLOPE_RANGE = (-0.65, -0.35)
PROP2_SLACK = 1e-12
# relative error uses a floored denominator so the 1e-9 absolute floor
# and the 1e-6 relative tolerance collapse into one gate
_FD_DENOM_FLOOR = 1e-3


def _rel_err(analytic: float, fd: float) -> float:
    return abs(analytic - fd) / max(abs(fd), _FD_DENOM_FLOOR)


@dataclass
class GradientAuditResult:
    worst: dict
    tolerance: float
    trials: int
    coords_checked: int
    passed: bool

    def to_json(self) -> dict:
        return {"audit": "gradient", "worst_relative_error": self.worst,
                "tolerance": self.tolerance, "trials": self.trials,
                "coords_checked": self.coords_checked, "passed": self.passed}


def _random_instance(rng: np.random.Generator, trial: int):
    n, d, dp = 12, 5, 4
    fams = [("polynomial", True), ("polynomial", False),
            ("gaussian", True), ("cosine", True)]
    f1, norm1 = fams[trial % 4]
    f2, norm2 = fams[(trial // 4) % 4]
    source = EmbeddingSet(data=rng.standard_normal((n, d)))
    target = EmbeddingSet(data=rng.standard_normal((n, dp)))
    paired = PairedEmbeddings(source=source, target=target)
    params = AdapterParams(W=0.2 * rng.standard_normal((d, d)),
                           b=0.2 * rng.standard_normal(d),
                           log_gamma=float(rng.uniform(-2.0, 0.5)),
                           coef0=float(rng.uniform(0.5, 1.5)))
    k1t = KernelSpec(family=f1, gamma=1.0, coef0=1.0, degree=int(rng.integers(1, 4)),
                     normalized=norm1)
    k2 = KernelSpec(family=f2, gamma=float(rng.uniform(0.1, 1.0)),
                    coef0=float(rng.uniform(0.5, 1.5)),
                    degree=int(rng.integers(1, 4)), normalized=norm2)
    perm = rng.permutation(n)[:8]
    batch = PairBatch(pairs=np.stack([perm[:4], perm[4:]], axis=1).astype(np.int64),
                      batch_size=4)
    w = float(rng.uniform(0.1, 2.0))
    return paired, params, k1t, k2, batch, w


def _perturbed(params: AdapterParams, block: str, idx, h: float) -> AdapterParams:
    p = params.copy()
    if block == "dW":
        p.W[idx] += h
    elif block == "db":
        p.b[idx] += h
    elif block == "dlog_gamma":
        p.log_gamma += h
    else:
        p.coef0 += h
    return p


def gradient_audit(seed: int = 0, trials: int = 200,
                   corrupt_block: str | None = None) -> GradientAuditResult:
    """Central-difference check of every gradient block.

    corrupt_block is a test fixture: it adds 1e-3 to one entry of that
    analytic block so the audit's own sensitivity can be demonstrated.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    h = 1e-5
    worst: dict = {}
    coords = 0

    def note(key, analytic, fd):
        nonlocal coords
        coords += 1
        if key == corrupt_block:
            analytic = analytic + 1e-3
        err = _rel_err(analytic, fd)
        worst[key] = max(worst.get(key, 0.0), err)

    for trial in range(trials):
        paired, params, k1t, k2, batch, w = _random_instance(rng, trial)

        def total_at(p):
            bd, _ = total_loss_and_grad(p, paired, batch, w, k2, k1_template=k1t)
            return bd.total

        _, grads = total_loss_and_grad(params, paired, batch, w, k2,
                                       k1_template=k1t)
        d = params.d
        wi, wj = int(rng.integers(d)), int(rng.integers(d))
        fd = (total_at(_perturbed(params, "dW", (wi, wj), h))
              - total_at(_perturbed(params, "dW", (wi, wj), -h))) / (2 * h)
        note("dW", grads.dW[wi, wj], fd)
        bi = int(rng.integers(d))
        fd = (total_at(_perturbed(params, "db", bi, h))
              - total_at(_perturbed(params, "db", bi, -h))) / (2 * h)
        note("db", grads.db[bi], fd)
        for key, analytic in (("dlog_gamma", grads.dlog_gamma),
                              ("dcoef0", grads.dcoef0)):
            fd = (total_at(_perturbed(params, key, None, h))
                  - total_at(_perturbed(params, key, None, -h))) / (2 * h)
            note(key, analytic, fd)

        # feature-baseline blocks
        R = 0.3 * rng.standard_normal((params.d, paired.target.d))
        rows = rng.permutation(paired.n)[:6]

        def feat_at(p, Rm):
            bd, _ = feature_alignment_loss_and_grad(p, Rm, paired, rows, w)
            return bd.total

        _, fgrads = feature_alignment_loss_and_grad(params, R, paired, rows, w)
        fd = (feat_at(_perturbed(params, "dW", (wi, wj), h), R)
              - feat_at(_perturbed(params, "dW", (wi, wj), -h), R)) / (2 * h)
        note("feature.dW", fgrads.dW[wi, wj], fd)
        fd = (feat_at(_perturbed(params, "db", bi, h), R)
              - feat_at(_perturbed(params, "db", bi, -h), R)) / (2 * h)
        note("feature.db", fgrads.db[bi], fd)
        ri, rj = int(rng.integers(params.d)), int(rng.integers(paired.target.d))
        Rp, Rm = R.copy(), R.copy()
        Rp[ri, rj] += h
        Rm[ri, rj] -= h
        fd = (feat_at(params, Rp) - feat_at(params, Rm)) / (2 * h)
        note("feature.dR", fgrads.dR[ri, rj], fd)

    passed = all(v < GRAD_TOL for v in worst.values())
    return GradientAuditResult(worst=worst, tolerance=GRAD_TOL, trials=trials,
                               coords_checked=coords, passed=passed)


@dataclass
class ConcentrationResult:
    m_values: list
    deviations: list
    slope: float | None
    loss_exact: float
    loss_batch_mean: float
    loss_z: float | None
    degenerate: bool
    passed: bool

    def to_json(self) -> dict:
        return {"audit": "concentration", "m_values": self.m_values,
                "mean_deviation": self.deviations, "slope": self.slope,
                "slope_range": list(SLOPE_RANGE), "loss_exact": self.loss_exact,
                "loss_batch_mean": self.loss_batch_mean, "loss_z": self.loss_z,
                "degenerate": self.degenerate, "passed": self.passed}


def _iid_pairs(rng: np.random.Generator, n: int, m: int) -> PairBatch:
    ia = rng.integers(0, n, size=m)
    ib = rng.integers(0, n, size=m)
    clash = ia == ib
    while clash.any():
        ib[clash] = rng.integers(0, n, size=int(clash.sum()))
        clash = ia == ib
    return PairBatch(pairs=np.stack([ia, ib], axis=1).astype(np.int64),
                     batch_size=m)


def _flat(g) -> np.ndarray:
    return np.concatenate([g.dW.ravel(), g.db, [g.dlog_gamma, g.dcoef0]])


def concentration_experiment(paired: PairedEmbeddings, params: AdapterParams,
                             m_values, repeats: int, seed: int = 0,
                             k2: KernelSpec | None = None,
                             k1_template: KernelSpec | None = None,
                             loss_batches: int = 10_000,
                             loss_batch_size: int = 32) -> ConcentrationResult:
    """Deviation-vs-M table for the stochastic alignment gradient."""
    n = paired.n
    if n > 64:
        raise ValueError(f"exact all-pairs mode limited to n <= 64, got {n}")
    m_values = [int(m) for m in m_values]
    if any(b <= a for a, b in zip(m_values, m_values[1:])) or not m_values:
        raise ValueError(f"m_values must be increasing, got {m_values}")
    if repeats < 100:
        raise ValueError(f"repeats must be >= 100, got {repeats}")
    k2 = k2 or KernelSpec(gamma=1.0 / paired.target.d)
    k1t = k1_template or KernelSpec(gamma=1.0 / paired.source.d)

    iu, ju = np.triu_indices(n, k=1)
    all_pairs = PairBatch(pairs=np.stack([iu, ju], axis=1).astype(np.int64),
                          batch_size=len(iu))
    loss_exact, exact_grad = alignment_loss_and_grad(params, paired, all_pairs,
                                                     k2, k1_template=k1t)
    exact = _flat(exact_grad)
    if np.linalg.norm(exact) < 1e-14:
        return ConcentrationResult(m_values=m_values, deviations=[0.0] * len(m_values),
                                   slope=None, loss_exact=loss_exact,
                                   loss_batch_mean=loss_exact, loss_z=None,
                                   degenerate=True, passed=True)

    rng = np.random.default_rng(seed)
    deviations = []
    for m in m_values:
        acc = 0.0
        for _ in range(repeats):
            batch = _iid_pairs(rng, n, m)
            _, g = alignment_loss_and_grad(params, paired, batch, k2,
                                           k1_template=k1t)
            acc += float(np.linalg.norm(_flat(g) - exact))
        deviations.append(acc / repeats)
    slope = float(np.polyfit(np.log(m_values), np.log(deviations), 1)[0])

    k1 = k1_from_params(k1t, params)
    vals = np.empty(loss_batches)
    for r in range(loss_batches):
        batch = _iid_pairs(rng, n, loss_batch_size)
        vals[r] = alignment_loss(params, paired, batch, k1, k2)
    se = float(vals.std(ddof=1) / np.sqrt(loss_batches))
    loss_z = abs(float(vals.mean()) - loss_exact) / se if se > 0 else 0.0
    passed = SLOPE_RANGE[0] <= slope <= SLOPE_RANGE[1] and loss_z < 3.0
    return ConcentrationResult(m_values=m_values, deviations=deviations,
                               slope=slope, loss_exact=loss_exact,
                               loss_batch_mean=float(vals.mean()),
                               loss_z=float(loss_z), degenerate=False,
                               passed=passed)


@dataclass
class Prop2Result:
    trials: int
    violations: int
    max_ratio: float
    passed: bool

    def to_json(self) -> dict:
        return {"audit": "prop2", "trials": self.trials,
                "violations": self.violations, "max_ratio": self.max_ratio,
                "passed": self.passed}


def prop2_audit(trials: int = 100_000, seed: int = 0) -> Prop2Result:
    """Monte Carlo check of |cos(x,a) - cos(f(x),a)| <= 2*lam/max norm.

    Every tenth trial is a stress case with ||f(x)|| = 1e-8 * ||x||.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    violations = 0
    max_ratio = 0.0
    block = 10_000
    d = 8
    done = 0
    while done < trials:
        m = min(block, trials - done)
        X = rng.standard_normal((m, d)) * 10.0 ** rng.uniform(-2, 2, size=(m, 1))
        A = rng.standard_normal((m, d))
        Wm = 0.5 * rng.standard_normal((m, d, d))
        bm = 0.5 * rng.standard_normal((m, d))
        U = X + np.einsum("mij,mj->mi", Wm, X) + bm
        # stress slice: f(x) shrunk to 1e-8 of ||x||
        stress = np.arange(m) % 10 == 0
        nx_s = np.linalg.norm(X[stress], axis=1)
        dir_s = rng.standard_normal((int(stress.sum()), d))
        dir_s /= np.linalg.norm(dir_s, axis=1)[:, None]
        U[stress] = (1e-8 * nx_s)[:, None] * dir_s
        nx = np.linalg.norm(X, axis=1)
        nu = np.linalg.norm(U, axis=1)
        na = np.linalg.norm(A, axis=1)
        lam = np.linalg.norm(U - X, axis=1)
        cos_x = np.einsum("ij,ij->i", X, A) / (nx * na)
        cos_u = np.einsum("ij,ij->i", U, A) / (nu * na)
        actual = np.abs(cos_x - cos_u)
        bound = 2.0 * lam / np.maximum(nx, nu)
        bad = actual > bound + PROP2_SLACK
        violations += int(bad.sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bound > 0, actual / bound, 0.0)
        max_ratio = max(max_ratio, float(ratio.max()))
        done += m
    return Prop2Result(trials=trials, violations=violations,
                       max_ratio=max_ratio, passed=violations == 0)


@dataclass
class KernelAuditResult:
    per_spec: list = field(default_factory=list)
    passed: bool = True

    def to_json(self) -> dict:
        return {"audit": "kernel", "per_spec": self.per_spec, "passed": self.passed}


def default_audit_specs(d: int = 8) -> list:
    return [KernelSpec(family="polynomial", gamma=1.0 / d, coef0=1.0, degree=3,
                       normalized=True),
            KernelSpec(family="polynomial", gamma=1.0 / d, coef0=1.0, degree=2,
                       normalized=False),
            KernelSpec(family="gaussian", gamma=1.0 / d),
            KernelSpec(family="cosine")]


def kernel_audit(specs=None, seed: int = 0, n: int = 64, d: int = 8,
                 ) -> KernelAuditResult:
    """Symmetry, range, and PSD-floor checks over random data."""
    rng = np.random.default_rng(seed)
    specs = specs if specs is not None else default_audit_specs(d)
    result = KernelAuditResult()
    for spec in specs:
        X = rng.standard_normal((n, d))
        K = kernel_matrix(spec, X)
        sym_gap = float(np.abs(K - K.T).max())
        symmetry_ok = sym_gap <= 1e-12
        intrinsically_normalized = spec.family in ("gaussian", "cosine")
        if spec.normalized or intrinsically_normalized:
            range_ok = bool(np.abs(K).max() <= 1.0 + 1e-12)
        else:
            range_ok = True
        lam_min = psd_probe(spec, X)
        psd_ok = lam_min >= -n * 1e-10
        entry = {"spec": spec.to_json(), "symmetry_ok": symmetry_ok,
                 "symmetry_gap": sym_gap, "range_ok": range_ok,
                 "lambda_min": lam_min, "psd_ok": psd_ok}
        result.per_spec.append(entry)
        result.passed = result.passed and symmetry_ok and range_ok and psd_ok
    return result


def make_concentration_corpus(seed: int = 11, n: int = 64, d: int = 16):
    """The standard Gaussian corpus + mildly perturbed params for the audit."""
    rng = np.random.default_rng(seed)
    source = EmbeddingSet(data=rng.standard_normal((n, d)))
    target = EmbeddingSet(data=rng.standard_normal((n, d)))
    params = AdapterParams(W=0.05 * rng.standard_normal((d, d)),
                           b=0.05 * rng.standard_normal(d),
                           log_gamma=float(np.log(1.0 / d)), coef0=1.0)
    return PairedEmbeddings(source=source, target=target), params


def make_rank_collapsed_corpus(seed: int = 42, n: int = 256, d: int = 16,
                               rank: int = 8, noise: float = 0.05,
                               squash_target: bool = False):
    """Synthetic end-to-end corpus: semantics preserved, fine detail lost.

    The target is i.i.d. Gaussian; the source is the same rows pushed
    through a rank-`rank` projector, `noise`-sigma additive noise, and a
    random rotation. With squash_target the target additionally goes
    through tanh(2x), so no linear map relates the two sides. Returns
    (source, target) arrays.
    """
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((n, d))
    Qf, _ = np.linalg.qr(rng.standard_normal((d, d)))
    proj = Qf[:, :rank] @ Qf[:, :rank].T
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    S = (T @ proj + noise * rng.standard_normal((n, d))) @ Q
    G = np.tanh(2.0 * T) if squash_target else T
    return S, G


def run_all(seed: int = 0, trials: int = 200, prop2_trials: int = 100_000,
            repeats: int = 200, loss_batches: int = 10_000,
            corrupt_block: str | None = None) -> dict:
    """All four audits; the CLI's verify payload."""
    grad = gradient_audit(seed=seed, trials=trials, corrupt_block=corrupt_block)
    paired, params = make_concentration_corpus()
    conc = concentration_experiment(paired, params, [4, 16, 64, 256],
                                    repeats=repeats, seed=seed,
                                    loss_batches=loss_batches)
    prop2 = prop2_audit(trials=prop2_trials, seed=seed)
    kern = kernel_audit(seed=seed)
    passed = grad.passed and conc.passed and prop2.passed and kern.passed
    return {"gradient": grad.to_json(), "concentration": conc.to_json(),
            "prop2": prop2.to_json(), "kernel": kern.to_json(),
            "passed": passed}
