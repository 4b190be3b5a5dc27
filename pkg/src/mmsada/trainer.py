"""Two-stage training, the method selector, Adam and AdaBN."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import kernels
from . import objectives as obj
from .diffcore import ContractError
from .evaluator import MetricsRecord, evaluate_all
from .nets import ModelBundle, NetConfig
from .synthdata import (ConfigError, DataError, DomainDataset, SegmentSet, SEG_CORR, POLICIES,
                        compose_batch, eval_windows, spawn_rngs)

log = logging.getLogger(__name__)

# full-scale schedule
FULL_SCALE_STAGE1_STEPS = 3000
FULL_SCALE_STAGE2_STEPS = 6000
FULL_SCALE_BATCH_SIZE = 128

METHODS = (
    "source-only", "adabn", "mmd", "mcd", "self-sup-only", "adversarial-only",
    "mm-sada", "supervised-target",
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float, reason: str):
        super().__init__(f"training diverged at step {step}: {reason} (loss={value})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class MethodPlan:
    lambda_d: float
    lambda_c: float
    alignment: str | None      # "adversarial" | "mmd" | "mcd" | None
    uses_target: bool          # unlabelled target rows enter training batches
    adapt_bn: bool             # evaluate target with target batch-norm statistics
    train_on_target: bool = False


def method_plan(method: str, lambda_d: float, lambda_c: float) -> MethodPlan:
    if method == "source-only":
        return MethodPlan(0.0, 0.0, None, False, False)
    if method == "adabn":
        return MethodPlan(0.0, 0.0, None, False, True)
    if method == "supervised-target":
        return MethodPlan(0.0, lambda_c, None, False, False, train_on_target=True)
    if method == "self-sup-only":
        return MethodPlan(0.0, lambda_c, None, True, True)
    if method == "adversarial-only":
        return MethodPlan(lambda_d, 0.0, "adversarial", True, True)
    if method == "mm-sada":
        return MethodPlan(lambda_d, lambda_c, "adversarial", True, True)
    if method == "mmd":
        return MethodPlan(lambda_d, 0.0, "mmd", True, True)
    if method == "mcd":
        return MethodPlan(lambda_d, 0.0, "mcd", True, True)
    raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


@dataclass
class ExperimentConfig:
    method: str = "mm-sada"
    source_domain: str = "D1"
    target_domain: str = "D2"
    lambda_d: float = 1.0
    lambda_c: float = 5.0
    stage1_lr: float = 1e-2
    stage1_steps: int = 600
    stage2_lr: float = 2e-4
    stage2_steps: int = 1200
    batch_size: int = 128
    weight_decay: float = 1e-7
    dropout: float = 0.5
    window_len: int = 16
    feat_dim: int = 64
    hidden: int = 128
    policy: str = SEG_CORR
    seed: int = 0
    epoch_steps: int = 50
    n_test_windows: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    unbiased_mmd: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def validate(self) -> None:
        method_plan(self.method, self.lambda_d, self.lambda_c)
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.batch_size <= 0 or self.batch_size % 4:
            raise ConfigError("batch_size must be a positive multiple of 4")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.lambda_d < 0 or self.lambda_c < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epoch_steps <= 0:
            raise ConfigError("epoch_steps must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps


# ---------------------------------------------------------------- Adam

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0, beta1, beta2, eps)


def adam_step(params, grads, state: OptimizerState, lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam; ``weight_decay * param`` is added to each gradient first."""
    if len(params) != len(state.m):
        raise ContractError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise ContractError(f"parameter {p.name or '?'} has no gradient")
        kernels.adam_update(p.data, g, m, v, lr, b1, b2, c1, c2, state.eps, weight_decay)


class Adam:
    def __init__(self, params, weight_decay: float = 0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.state = OptimizerState.for_params(self.params, beta1, beta2, eps)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.weight_decay)

    def zero_grad(self) -> None:
        dc.zero_grads(self.params)


# ---------------------------------------------------------------- AdaBN

def batchnorm_input_stats(bundle: ModelBundle, ss: SegmentSet, n_windows: int = 5):
    """Population mean/var of every BN input over the equidistant windows of ``ss``."""
    if len(ss) == 0:
        raise DataError("AdaBN needs a non-empty target set")
    xs, _ = eval_windows(ss, bundle.cfg.window_len, n_windows)
    stats = []
    for m in range(bundle.cfg.n_modalities):
        p = bundle.params
        h = np.maximum(xs[m] @ p[f"F{m}.W1"].data + p[f"F{m}.b1"].data, 0.0)
        stats.append((h.mean(axis=0), h.var(axis=0)))
    return stats


def adabn_adapt(bundle: ModelBundle, target: SegmentSet, n_windows: int = 5) -> ModelBundle:
    """Copy of ``bundle`` whose BN running statistics come from the target windows.

    Weights are shared, not copied, and never modified.
    """
    if not getattr(bundle, "bn", None):
        return bundle
    states = bundle.bn_snapshot()
    for st, (mu, var) in zip(states, batchnorm_input_stats(bundle, target, n_windows)):
        st.running_mean = mu
        st.running_var = var
    return bundle.with_bn(states)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    bundle: ModelBundle
    records: list[MetricsRecord]
    step_log: list[dict] = field(default_factory=list)
    target_label_reads: int = 0
    plan: MethodPlan | None = None

    def eval_bundle(self, target: SegmentSet, n_windows: int = 5) -> ModelBundle:
        if self.plan is not None and self.plan.adapt_bn:
            return adabn_adapt(self.bundle, target, n_windows)
        return self.bundle


def net_config_for(cfg: ExperimentConfig, source: DomainDataset) -> NetConfig:
    return NetConfig(
        n_modalities=source.train.n_modalities, input_dims=source.dims,
        window_len=cfg.window_len, hidden=cfg.hidden, feat_dim=cfg.feat_dim,
        n_classes=source.class_count, dropout=cfg.dropout, mcd_heads=cfg.method == "mcd",
    )


def _step_objective(bundle, batch, plan: MethodPlan, weights: obj.LossWeights, stage: int,
                    rng, cfg: ExperimentConfig):
    feats = obj.batch_features(bundle, batch, dc.TRAIN, rng)
    if plan.alignment != "mcd":
        alignment = plan.alignment or "adversarial"
        return obj.total_loss(bundle, batch, weights, alignment=alignment, feats=feats)

    # MCD: both heads learn the source task; on target rows the heads are pushed
    # to disagree while the reversed gradient teaches F to make them agree
    elig = batch.eligible
    fe = [dc.take_rows(f, elig) for f in feats]
    ly = dc.add(obj.classification_loss(bundle, fe, batch.y[elig], head=0),
                obj.classification_loss(bundle, fe, batch.y[elig], head=1))
    breakdown = {"loss_y": ly.item(), "loss_d": [0.0] * len(feats), "loss_c": 0.0}
    total = ly
    if stage == 2 and weights.lambda_d > 0:
        tgt = batch.target_rows
        ft = [dc.gradient_reversal(dc.take_rows(f, tgt)) for f in feats]
        p1 = obj.fused_probs([bundle.classify(m, f, 0) for m, f in enumerate(ft)])
        p2 = obj.fused_probs([bundle.classify(m, f, 1) for m, f in enumerate(ft)])
        disc = obj.mcd_discrepancy(p1, p2)
        total = dc.add(total, dc.scale(disc, -weights.lambda_d))
        breakdown["loss_d"][0] = disc.item()
    breakdown["total"] = total.item()
    return total, breakdown


def train(cfg: ExperimentConfig, datasets: dict[str, DomainDataset],
          keep_step_log: bool = False) -> TrainResult:
    """Run the two-stage schedule for ``cfg.method`` and record per-epoch metrics.

    Stage 1 optimises the classification and (if active) correspondence
    terms at ``stage1_lr``; stage 2 adds the alignment term at ``stage2_lr``.
    """
    cfg.validate()
    for key in (cfg.source_domain, cfg.target_domain):
        if key not in datasets:
            raise ConfigError(f"unknown domain {key!r}; have {sorted(datasets)}")
    plan = method_plan(cfg.method, cfg.lambda_d, cfg.lambda_c)
    src, tgt = datasets[cfg.source_domain], datasets[cfg.target_domain]
    train_src = tgt.train if plan.train_on_target else src.train
    init_rng, batch_rng, drop_rng = spawn_rngs(cfg.seed, 3)

    bundle = ModelBundle(net_config_for(cfg, src), init_rng)
    opt = Adam(bundle.parameters(), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    reads_before = tgt.train.label_reads

    records: list[MetricsRecord] = []
    step_log: list[dict] = []
    acc = _EpochAccumulator(bundle.cfg.n_modalities)
    initial = None
    over = 0
    for step in range(cfg.total_steps):
        stage = 1 if step < cfg.stage1_steps else 2
        lr = cfg.stage1_lr if stage == 1 else cfg.stage2_lr
        weights = obj.LossWeights(plan.lambda_d if stage == 2 else 0.0, plan.lambda_c)
        if plan.alignment == "mcd":
            weights = obj.LossWeights(plan.lambda_d, 0.0)

        batch = compose_batch(train_src, tgt.train if plan.uses_target else train_src,
                              cfg.batch_size, cfg.policy, cfg.window_len, batch_rng)
        if not plan.uses_target:
            batch = batch.select(batch.source_rows)

        loss, breakdown = _step_objective(bundle, batch, plan, weights, stage, drop_rng, cfg)
        value = breakdown["total"]
        if not math.isfinite(value):
            raise DivergenceError(step, value, "non-finite loss")
        if initial is None:
            initial = abs(value)
        over = over + 1 if abs(value) > cfg.divergence_factor * initial else 0
        if over >= cfg.divergence_patience:
            raise DivergenceError(step, value, f"loss above {cfg.divergence_factor}x its "
                                               f"initial value for {over} steps")

        opt.zero_grad()
        dc.backward(loss)
        opt.step(lr)

        acc.add(breakdown)
        if keep_step_log:
            step_log.append({"step": step, "stage": stage, **breakdown,
                             "lambda_d": weights.lambda_d, "lambda_c": weights.lambda_c})
        if (step + 1) % cfg.epoch_steps == 0:
            records.append(_epoch_record(cfg, plan, bundle, src, tgt, acc, len(records) + 1))
            acc = _EpochAccumulator(bundle.cfg.n_modalities)

    if acc.n:
        # trailing partial epoch, so short runs still report something
        records.append(_epoch_record(cfg, plan, bundle, src, tgt, acc, len(records) + 1))
    reads = tgt.train.label_reads - reads_before
    return TrainResult(bundle, records, step_log, reads, plan)


class _EpochAccumulator:
    def __init__(self, M: int):
        self.n = 0
        self.y = 0.0
        self.d = np.zeros(M)
        self.c = 0.0

    def add(self, br: dict) -> None:
        self.n += 1
        self.y += br["loss_y"]
        self.d += np.asarray(br["loss_d"][: len(self.d)] + [0.0] * (len(self.d) - len(br["loss_d"])))
        self.c += br["loss_c"]

    def means(self):
        n = max(self.n, 1)
        return self.y / n, list(self.d / n), self.c / n


def _epoch_record(cfg, plan, bundle, src, tgt, acc, epoch) -> MetricsRecord:
    test_src = tgt.test if plan.train_on_target else src.test
    src_acc = evaluate_all(bundle, test_src, cfg.n_test_windows)
    eval_b = adabn_adapt(bundle, tgt.train, cfg.n_test_windows) if plan.adapt_bn else bundle
    tgt_acc = evaluate_all(eval_b, tgt.test, cfg.n_test_windows)
    ly, ld, lc = acc.means()
    return MetricsRecord(
        epoch=epoch, method=cfg.method, source_top1=src_acc["fused"], target_top1=tgt_acc["fused"],
        modality_top1=[tgt_acc[m] for m in range(bundle.cfg.n_modalities)],
        loss_y=ly, loss_d=ld, loss_c=lc, seed=cfg.seed, lambda_d=plan.lambda_d,
        lambda_c=plan.lambda_c, source_domain=cfg.source_domain,
        target_domain=cfg.target_domain, policy=cfg.policy,
    )
