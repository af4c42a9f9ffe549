"""Desk-scale study drivers.

Each driver is a pure function of its arguments and returns a
:class:`StudyReport`, which serializes to deterministic JSON and CSV.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .data import Dataset, ImbalanceSpec, make_blobs, perturb
from .engine import Model, TrainConfig, TrainingDiverged, init_mlp, train
from .federated import FLConfig, FederationResult, run_federation
from .merge import barrier, match_weights, scale_layer
from .regularizers import RegularizerSpec
from .scope import ScopeTarget, mean_scope_kl, scope_estimate, scope_fuse

FACTORS = (
    "optimizer",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "feature_noise",
    "label_noise",
    "data_size",
    "label_imbalance",
)


@dataclass(frozen=True)
class DeskSetup:
    """Synthetic data plus MLP shape shared by every study."""

    num_classes: int = 10
    dim: int = 20
    per_class: int = 200
    spread: float = 0.3
    modes_per_class: int = 3
    hidden: Tuple[int, ...] = (64, 64)
    data_seed: int = 0

    def data(self, seed: Optional[int] = None) -> Tuple[Dataset, Dataset]:
        return make_blobs(
            self.num_classes,
            self.dim,
            self.per_class,
            self.spread,
            seed=self.data_seed if seed is None else seed,
            modes_per_class=self.modes_per_class,
        )

    @property
    def sizes(self) -> List[int]:
        return [self.dim, *self.hidden, self.num_classes]

    def model(self, seed: int) -> Model:
        return init_mlp(self.sizes, seed=seed)


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g") if math.isfinite(v) else str(v)
    return v


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


@dataclass
class StudyReport:
    name: str
    columns: List[str]
    rows: List[list]
    summary: Dict = field(default_factory=dict)
    config: Dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {
            "study": self.name,
            "config": self.config,
            "columns": self.columns,
            "rows": self.rows,
            "summary": self.summary,
        }
        return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


# ---------------------------------------------------------------- conditions


@dataclass(frozen=True)
class ConditionSpec:
    factor: str
    setting_same: object
    setting_diff: object
    seeds: Tuple[int, ...] = (0, 1, 2)
    allow_same: bool = False

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ValueError(f"unknown factor {self.factor!r}")
        if self.setting_same == self.setting_diff and not self.allow_same:
            raise ValueError(f"{self.factor}: settings must differ")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass
class ConditionReport:
    factor: str
    mean_scope_kl: float
    barrier_same: float
    barrier_diff: float
    failed: bool = False
    per_seed: List[Tuple[float, float, float]] = field(default_factory=list)

    @property
    def diff(self) -> float:
        return self.barrier_diff - self.barrier_same


def default_condition_specs(seeds: Sequence[int] = (0, 1, 2)) -> List[ConditionSpec]:
    s = tuple(seeds)
    return [
        ConditionSpec("optimizer", "sgd", "adam", s),
        ConditionSpec("learning_rate", 0.03, 0.001, s),
        ConditionSpec("weight_decay", 1e-5, 1e-3, s),
        ConditionSpec("batch_size", 32, 1024, s),
        ConditionSpec("feature_noise", 0.0, 0.1, s),
        ConditionSpec("label_noise", 0.0, 0.1, s),
        ConditionSpec("data_size", 1.0, 0.1, s),
        ConditionSpec("label_imbalance", 0, 1, s),
    ]


# noisier classes than the default setup so shared-init pairs stay connected
CONDITION_SETUP = DeskSetup(spread=1.0)
DEFAULT_CONDITION_TRAIN = TrainConfig(
    epochs=60, batch_size=32, optimizer="sgd", learning_rate=0.03, momentum=0.9, weight_decay=1e-5
)
ADAM_LR = 3e-4


def _condition_inputs(factor: str, setting, train_set: Dataset, base: TrainConfig, seed: int):
    """Training set and config for one side of a condition factor."""
    cfg = base
    data = train_set
    if factor == "optimizer":
        cfg = replace(base, optimizer=setting, learning_rate=ADAM_LR if setting == "adam" else base.learning_rate)
    elif factor == "learning_rate":
        cfg = replace(base, learning_rate=float(setting))
    elif factor == "weight_decay":
        cfg = replace(base, weight_decay=float(setting))
    elif factor == "batch_size":
        # batches larger than the data set are clipped to full batch
        cfg = replace(base, batch_size=min(int(setting), len(train_set)))
    elif factor == "feature_noise":
        data = perturb(train_set, "feature_noise", float(setting), seed)
    elif factor == "label_noise":
        data = perturb(train_set, "label_noise", float(setting), seed)
    elif factor == "data_size":
        data = perturb(train_set, "subsample", float(setting), seed)
    elif factor == "label_imbalance":
        major = tuple(range(train_set.num_classes // 2))
        data = perturb(train_set, "imbalance", ImbalanceSpec(major, 0.9, int(setting)), seed)
    return data, cfg


def run_condition_matrix(
    specs: Sequence[ConditionSpec],
    setup: DeskSetup = CONDITION_SETUP,
    base_config: TrainConfig = DEFAULT_CONDITION_TRAIN,
    shared_init: bool = True,
) -> Tuple[List[ConditionReport], StudyReport]:
    """Train M0/M1 (same setting) and M2 (other setting).

    With ``shared_init`` all three start from one initialization and differ
    only in data order and condition; otherwise each gets its own init seed.
    Barriers are test-error barriers; the scope column is the mean per-tensor
    KL between M0 and M2.
    """
    train_set, test_set = setup.data()
    reports: List[ConditionReport] = []
    for spec in specs:
        per_seed = []
        failed = False
        for s in spec.seeds:
            same_data, same_cfg = _condition_inputs(spec.factor, spec.setting_same, train_set, base_config, s)
            diff_data, diff_cfg = _condition_inputs(spec.factor, spec.setting_diff, train_set, base_config, s)
            try:
                inits = [setup.model(3 * s if shared_init else 3 * s + i) for i in range(3)]
                m0, _ = train(inits[0], same_data, same_cfg, rng_seed=3 * s)
                m1, _ = train(inits[1], same_data, same_cfg, rng_seed=3 * s + 1)
                m2, _ = train(inits[2], diff_data, diff_cfg, rng_seed=3 * s + 2)
            except (TrainingDiverged, FloatingPointError):
                failed = True
                break
            kl = mean_scope_kl(scope_estimate(m0), scope_estimate(m2))
            b_same = barrier(m0, m1, test_set)[0].barrier_err
            b_diff = barrier(m0, m2, test_set)[0].barrier_err
            per_seed.append((kl, b_same, b_diff))
        if failed:
            reports.append(ConditionReport(spec.factor, math.nan, math.nan, math.nan, True, per_seed))
            continue
        arr = np.array(per_seed)
        reports.append(
            ConditionReport(spec.factor, float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()),
                            False, per_seed)
        )
    ok = [r for r in reports if not r.failed]
    rho = float(stats.spearmanr([r.mean_scope_kl for r in ok], [r.diff for r in ok])[0]) if len(ok) > 2 else math.nan
    table = StudyReport(
        "condition_matrix",
        ["factor", "kl_d", "ba_same", "ba_diff", "diff", "failed"],
        [[r.factor, r.mean_scope_kl, r.barrier_same, r.barrier_diff, r.diff, r.failed] for r in reports],
        summary={
            "same_le_diff": sum(r.barrier_same <= r.barrier_diff for r in ok),
            "factors": len(reports),
            "spearman_kl_vs_diff": rho,
        },
        config={"setup": asdict(setup), "train": asdict(base_config), "shared_init": shared_init,
                "seeds": [list(s.seeds) for s in specs]},
    )
    return reports, table


# ------------------------------------------------------------- manual scaling


def run_scaling_study(
    setup: DeskSetup = DeskSetup(),
    seed_pairs: Sequence[Tuple[int, int]] = ((0, 1), (2, 3), (4, 5)),
    alphas: Sequence[float] = (1.0, 5.0),
    layer: int = 0,
    config: TrainConfig = DEFAULT_CONDITION_TRAIN,
) -> StudyReport:
    """Loss barrier between w1 and w2 with one layer of w2 rescaled by alpha."""
    train_set, test_set = setup.data()
    rows = []
    exact = True
    for a, b in seed_pairs:
        w1, _ = train(setup.model(a), train_set, config, rng_seed=a)
        w2, _ = train(setup.model(b), train_set, config, rng_seed=b)
        base, _ = barrier(w1, w2, test_set)
        for alpha in alphas:
            rep, _ = barrier(w1, scale_layer(w2, layer, alpha), test_set)
            if alpha == 1.0:
                exact &= rep.to_dict() == base.to_dict()
            rows.append([a, b, float(alpha), rep.barrier_loss, rep.barrier_err])
    return StudyReport(
        "manual_scaling",
        ["seed_a", "seed_b", "alpha", "barrier_loss", "barrier_err"],
        rows,
        summary={"alpha1_exact": exact},
        config={"setup": asdict(setup), "train": asdict(config), "layer": layer, "alphas": list(alphas)},
    )


# ------------------------------------------------------- WSA mode connectivity


DEFAULT_WSA_TRAIN = TrainConfig(epochs=60, batch_size=32, learning_rate=0.03, momentum=0.9, weight_decay=1e-5)


def run_wsa_barrier_study(
    setup: DeskSetup = DeskSetup(),
    seed_pairs: Sequence[Tuple[int, int]] = ((0, 1), (2, 3), (4, 5)),
    lam: float = 0.3,
    config: TrainConfig = DEFAULT_WSA_TRAIN,
    weights_only: bool = False,
    with_matching: bool = True,
) -> StudyReport:
    """Barriers of baseline pairs versus scope-aligned pairs.

    Both members of a pair are pulled toward the fused scope of their two
    initial models. Rows hold one pair each; the summary holds the 2x2 table
    of mean loss barriers.
    """
    if len(seed_pairs) < 1:
        raise ValueError("need at least one seed pair")
    train_set, test_set = setup.data()
    rows = []
    for a, b in seed_pairs:
        inits = [setup.model(a), setup.model(b)]
        target = scope_fuse([scope_estimate(m, weights_only=weights_only) for m in inits])
        target = ScopeTarget(target.entries, origin="init_scope")
        row = [a, b]
        for arm_lam in (0.0, lam):
            reg = RegularizerSpec("wsa", arm_lam, target=target, weights_only=weights_only) if arm_lam > 0 else None
            w1, _ = train(inits[0], train_set, config, reg, rng_seed=a)
            w2, _ = train(inits[1], train_set, config, reg, rng_seed=b)
            plain = barrier(w1, w2, test_set)[0]
            row += [plain.barrier_loss, plain.barrier_err]
            if with_matching:
                perm = match_weights(w1, w2).permutation
                matched = barrier(w1, w2, test_set, permutation=perm)[0]
                row += [matched.barrier_loss, matched.barrier_err]
            else:
                row += [math.nan, math.nan]
        rows.append(row)
    cols = [
        "seed_a", "seed_b",
        "base_loss", "base_err", "base_matched_loss", "base_matched_err",
        "wsa_loss", "wsa_err", "wsa_matched_loss", "wsa_matched_err",
    ]
    rep = StudyReport("wsa_barrier", cols, rows,
                      config={"setup": asdict(setup), "train": asdict(config), "lam": lam,
                              "weights_only": weights_only, "pairs": [list(p) for p in seed_pairs]})
    rep.summary = {
        "baseline": {"plain": float(np.mean(rep.column("base_loss"))),
                     "matched": float(np.mean(rep.column("base_matched_loss")))},
        "wsa": {"plain": float(np.mean(rep.column("wsa_loss"))),
                "matched": float(np.mean(rep.column("wsa_matched_loss")))},
    }
    return rep


# ------------------------------------------------------------------ federated


DEFAULT_FL = FLConfig(rounds=150, local_steps=20, learning_rate=0.01, lam=5.0, max_grad_norm=1.0)


def _fl_data(setup: DeskSetup, seed: int):
    train_set, test_set = setup.data(seed)
    return train_set, test_set, setup.model(seed)


def _final_mean(result: FederationResult, last: int = 10) -> float:
    acc = result.accuracies()
    return float(acc[-last:].mean()) if acc.size else math.nan


def _safe_federation(cfg: FLConfig, train_set, init, test_set, alpha) -> Optional[FederationResult]:
    try:
        return run_federation(cfg, train_set, init, test_set, dirichlet_alpha=alpha)
    except RuntimeError:
        return None


def run_fl_comparison(
    setup: DeskSetup = DeskSetup(),
    alphas: Sequence[float] = (0.5, 1.0),
    seeds: Sequence[int] = (0, 1, 2),
    config: FLConfig = DEFAULT_FL,
    algorithms: Sequence[str] = ("fedavg", "fedavg_wsa", "fedprox", "fedprox_wsa"),
    warmup: int = 20,
    keep_results: bool = False,
) -> Tuple[StudyReport, Dict]:
    """Final-10-round accuracy and sigma dispersion for each FL arm."""
    rows = []
    kept: Dict = {}
    for alpha in alphas:
        for seed in seeds:
            train_set, test_set, init = _fl_data(setup, seed)
            for alg in algorithms:
                cfg = replace(config, algorithm=alg, seed=seed)
                res = _safe_federation(cfg, train_set, init, test_set, alpha)
                if res is None:
                    rows.append([alpha, seed, alg, math.nan, math.nan])
                    continue
                disp = [r.sigma_dispersion() for r in res.records]
                rows.append([alpha, seed, alg, _final_mean(res), float(np.mean(disp[warmup:])) if disp[warmup:] else math.nan])
                if keep_results:
                    kept[(alpha, seed, alg)] = res
    rep = StudyReport(
        "fl_comparison",
        ["alpha", "seed", "algorithm", "final_acc", "sigma_dispersion"],
        rows,
        config={"setup": asdict(setup), "fl": _fl_dict(config), "alphas": list(alphas), "seeds": list(seeds)},
    )
    return rep, kept


def _fl_dict(cfg: FLConfig) -> dict:
    d = asdict(cfg)
    d["fixed_target"] = None if cfg.fixed_target is None else cfg.fixed_target.to_dict()
    return d


def run_lambda_sweep(
    values: Sequence[float] = (0.0, 1.0, 5.0, 10.0, 50.0),
    config: FLConfig = DEFAULT_FL,
    setup: DeskSetup = DeskSetup(),
    seeds: Sequence[int] = (0, 1, 2),
    alpha: float = 0.5,
    early_round: Optional[int] = None,
) -> StudyReport:
    """Seed-averaged accuracy at an early round and over the last 10 rounds.

    A diverged run is recorded with NaN accuracy and counted in ``diverged``.
    """
    values = list(values)
    if not values or 0.0 not in values:
        raise ValueError("values must be non-empty and include 0")
    early = config.rounds // 10 if early_round is None else early_round
    rows = []
    for lam in values:
        early_acc, final_acc, diverged = [], [], 0
        for seed in seeds:
            train_set, test_set, init = _fl_data(setup, seed)
            alg = config.algorithm if config.uses_wsa else config.algorithm + "_wsa"
            cfg = replace(config, algorithm=alg, lam=float(lam), seed=seed)
            res = _safe_federation(cfg, train_set, init, test_set, alpha)
            if res is None:
                diverged += 1
                continue
            early_acc.append(float(res.accuracies()[early]))
            final_acc.append(_final_mean(res))
        rows.append([float(lam),
                     float(np.mean(early_acc)) if early_acc else math.nan,
                     float(np.mean(final_acc)) if final_acc else math.nan,
                     diverged])
    return StudyReport(
        "lambda_sweep",
        ["lam", "acc_early", "acc_final", "diverged"],
        rows,
        config={"setup": asdict(setup), "fl": _fl_dict(config), "seeds": list(seeds), "alpha": alpha,
                "early_round": early},
    )


def run_predefined_ablation(
    targets: Sequence[Tuple[float, float]] = ((0.0, 0.01), (0.0, 0.1), (0.0, 10.0)),
    config: FLConfig = DEFAULT_FL,
    setup: DeskSetup = DeskSetup(),
    seeds: Sequence[int] = (0, 1, 2),
    alpha: float = 0.5,
) -> StudyReport:
    """Fused-scope arm against fixed Gaussian targets and a plain baseline."""
    for mu, sigma in targets:
        if not sigma > 0:
            raise ValueError("predefined sigma must be positive")
    rows = []
    for seed in seeds:
        train_set, test_set, init = _fl_data(setup, seed)
        names = scope_estimate(init, weights_only=config.weights_only).names()
        arms: List[Tuple[str, FLConfig]] = [
            ("fedavg", replace(config, algorithm="fedavg", seed=seed)),
            ("fused", replace(config, algorithm="fedavg_wsa", seed=seed)),
        ]
        for mu, sigma in targets:
            fixed = ScopeTarget.constant(names, mu, sigma)
            arms.append((f"N({mu:g},{sigma:g})", replace(config, algorithm="fedavg_wsa", seed=seed, fixed_target=fixed)))
        for label, cfg in arms:
            res = _safe_federation(cfg, train_set, init, test_set, alpha)
            rows.append([seed, label, _final_mean(res) if res is not None else math.nan])
    return StudyReport(
        "predefined_ablation",
        ["seed", "arm", "final_acc"],
        rows,
        config={"setup": asdict(setup), "fl": _fl_dict(config), "targets": [list(t) for t in targets],
                "seeds": list(seeds), "alpha": alpha},
    )


def run_window_study(
    windows: Sequence[Optional[Tuple[int, int]]] = (None, (0, 50), (50, 100), (100, 150)),
    config: FLConfig = DEFAULT_FL,
    setup: DeskSetup = DeskSetup(),
    seed: int = 0,
    alpha: float = 0.5,
) -> StudyReport:
    """Per-round accuracy when the penalty is active only inside a window.

    ``None`` means active for the whole run; a baseline fedavg column is
    always included.
    """
    train_set, test_set, init = _fl_data(setup, seed)
    curves = {"fedavg": _safe_federation(replace(config, algorithm="fedavg", seed=seed), train_set, init, test_set, alpha)}
    for w in windows:
        label = "always" if w is None else f"{w[0]}-{w[1]}"
        cfg = replace(config, algorithm="fedavg_wsa", seed=seed, wsa_window=w)
        curves[label] = _safe_federation(cfg, train_set, init, test_set, alpha)
    labels = list(curves)
    rows = []
    for t in range(config.rounds):
        rows.append([t] + [curves[k].records[t].acc if curves[k] is not None else math.nan for k in labels])
    return StudyReport(
        "intervention_window",
        ["round"] + labels,
        rows,
        summary={k: (_final_mean(v) if v is not None else math.nan) for k, v in curves.items()},
        config={"setup": asdict(setup), "fl": _fl_dict(config), "seed": seed, "alpha": alpha,
                "windows": [None if w is None else list(w) for w in windows]},
    )


STUDIES: Dict[str, Callable] = {
    "conditions": lambda **kw: run_condition_matrix(default_condition_specs(), **kw)[1],
    "scaling": run_scaling_study,
    "wsa_barrier": run_wsa_barrier_study,
    "fl_comparison": lambda **kw: run_fl_comparison(**kw)[0],
    "lambda_sweep": run_lambda_sweep,
    "predefined": run_predefined_ablation,
    "window": run_window_study,
}
