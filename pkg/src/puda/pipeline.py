"""Two-step training orchestration plus the comparison baselines.

Step 1 trains encoder, head and decoder jointly on the combined objective,
computing selection thresholds at the top of every epoch and harvesting
label candidates after the warm-up. Step 2 trains the independent final
classifier on the extracted pseudo-labels; only that classifier is used for
inference. The source-only and nnPU-only baselines reuse the same loop with
the other loss terms switched off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import losses, models, selector
from .datasets import ScenarioBundle
from .losses import LossConfig
from .models import ArchConfig, FinalClassifier, ModelBundle
from .selector import CandidateSet, ExtractionConfig, PseudoLabeledSet

BASELINES = ("source_only", "nnpu_only")
METHODS = ("pu_da",) + BASELINES


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class TrainConfig:
    """Everything a run needs besides the scenario itself."""

    warm_up: int = 20
    step1_max_epoch: int = 40
    step2_max_epoch: int = 30
    batch_source: int = 64
    batch_positive: int = 16
    batch_unlabeled: int = 64
    batch_step2: int = 64
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    alpha: float = 1.0
    beta: float = 0.1
    delta: float = 1.0
    base_loss: str = "logistic"
    eps: float = 1e-7
    nnpu_gradient_ascent: bool = False
    t_p: float = 0.95
    t_n: float = 0.05
    m: int = 20
    soft_pseudo_labels: bool = True
    stopping: str = "fixed"
    patience: int = 5
    holdout_fraction: float = 0.1
    d_z: int = 32
    encoder_hidden: tuple = (64, 64)
    head_hidden: tuple = (32,)
    final_hidden: tuple = (64, 32)
    seed: int = 0

    def __post_init__(self):
        if self.warm_up < 0 or self.step1_max_epoch < self.warm_up:
            raise ValueError("need 0 <= warm_up <= step1_max_epoch")
        for name in ("batch_source", "batch_positive", "batch_unlabeled", "batch_step2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.stopping not in ("fixed", "patience"):
            raise ValueError(f"unknown stopping mode {self.stopping!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.head_hidden = tuple(self.head_hidden)
        self.final_hidden = tuple(self.final_hidden)

    def loss_config(self, pi: float) -> LossConfig:
        return LossConfig(pi=pi, alpha=self.alpha, beta=self.beta, delta=self.delta,
                          base_loss=self.base_loss, eps=self.eps,
                          nnpu_gradient_ascent=self.nnpu_gradient_ascent)

    def extraction_config(self) -> ExtractionConfig:
        return ExtractionConfig(t_p=self.t_p, t_n=self.t_n, m=self.m)

    def arch_config(self, input_shape) -> ArchConfig:
        return ArchConfig(input_shape=tuple(input_shape), d_z=self.d_z,
                          encoder_hidden=self.encoder_hidden,
                          head_hidden=self.head_hidden,
                          final_hidden=self.final_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("encoder_hidden", "head_hidden", "final_hidden"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def stack_features(examples) -> torch.Tensor:
    return torch.as_tensor(np.stack([ex.features for ex in examples]),
                           dtype=torch.float32)


def stack_labels(examples) -> torch.Tensor:
    return torch.as_tensor([ex.true_label for ex in examples], dtype=torch.float32)


class _Cycler:
    """Endless shuffled mini-batch index stream over one pool."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = min(batch, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return out


class Predictor:
    """Uniform prediction surface over either (G, F) or the final classifier C."""

    def __init__(self, proba_fn):
        self._proba_fn = proba_fn

    def predict_proba(self, examples) -> np.ndarray:
        return self._proba_fn(examples)

    def predict(self, examples) -> np.ndarray:
        return (self.predict_proba(examples) > 0.5).astype(int)

    @classmethod
    def from_encoder_head(cls, encoder, head) -> "Predictor":
        def proba(examples):
            x = stack_features(examples)
            return models.predict_proba(encoder, head, x).numpy().astype(np.float64)
        return cls(proba)

    @classmethod
    def from_final(cls, final: FinalClassifier) -> "Predictor":
        def proba(examples):
            x = stack_features(examples)
            with torch.no_grad():
                return torch.softmax(final(x), dim=1)[:, 1].numpy().astype(np.float64)
        return cls(proba)


@dataclass
class Step1Result:
    bundle: ModelBundle
    candidates: CandidateSet
    loss_trace: list = field(default_factory=list)
    thresholds_trace: list = field(default_factory=list)
    selector_trace: list = field(default_factory=list)


def run_step1(scenario: ScenarioBundle, config: TrainConfig,
              variant: str = "pu_da") -> Step1Result:
    """Epoch loop of the first step.

    Per epoch: thresholds at the top, mini-batch updates of G, F and D on the
    combined objective, then (strictly after the warm-up) candidate harvesting
    over the full unlabeled pool. Baseline variants keep only their loss term
    and skip harvesting. Deterministic given (scenario, config.seed).
    """
    if variant not in METHODS:
        raise ValueError(f"unknown variant {variant!r}")
    if not 0.0 < scenario.class_prior < 1.0:
        raise ValueError("scenario class prior must lie strictly in (0, 1)")

    torch.manual_seed(config.seed)
    sample_gen = torch.Generator().manual_seed(config.seed + 1)
    batch_rng = np.random.default_rng(config.seed + 2)

    input_shape = scenario.source[0].features.shape
    bundle = models.build_models(config.arch_config(input_shape))
    encoder, head, decoder = bundle.encoder, bundle.head, bundle.decoder
    loss_cfg = config.loss_config(scenario.class_prior)

    x_source = stack_features(scenario.source)
    y_source = stack_labels(scenario.source)
    x_pos = stack_features(scenario.target_positive)
    x_unl = stack_features(scenario.target_unlabeled)
    source_negatives = scenario.source_negatives()

    params = list(bundle.step1_parameters())
    opt = _make_optimizer(params, config)

    def predict_fn(examples):
        return models.predict_proba(encoder, head, stack_features(examples)).numpy()

    cyc_source = _Cycler(len(scenario.source), config.batch_source, batch_rng)
    cyc_pos = _Cycler(len(scenario.target_positive), config.batch_positive, batch_rng)
    cyc_unl = _Cycler(len(scenario.target_unlabeled), config.batch_unlabeled, batch_rng)
    if variant == "source_only":
        steps_per_epoch = math.ceil(len(scenario.source) / cyc_source.batch)
    else:
        steps_per_epoch = math.ceil(len(scenario.target_unlabeled) / cyc_unl.batch)

    snap = models.snapshot(encoder, head, tag=0)
    candidates = CandidateSet()
    result = Step1Result(bundle=bundle, candidates=candidates)
    truth_by_id = {ex.id: ex.true_label for ex in scenario.target_unlabeled}
    global_step = 0

    def compute_step_terms() -> dict:
        terms = {}
        mu_s = lv_s = idx_s = idx_u = z_u = None
        if variant != "source_only":
            idx_p = cyc_pos.next_batch()
            idx_u = cyc_unl.next_batch()
            mu_p, lv_p = encoder(x_pos[idx_p])
            mu_u, lv_u = encoder(x_unl[idx_u])
            z_p = models.reparameterize(mu_p, lv_p, sample_gen)
            z_u = models.reparameterize(mu_u, lv_u, sample_gen)
            p_p = torch.softmax(head(z_p), dim=1)[:, 1]
            p_u = torch.softmax(head(z_u), dim=1)[:, 1]
            terms["pu"] = losses.nnpu_loss(
                p_p, p_u, loss_cfg.pi, base_loss=loss_cfg.base_loss,
                eps=loss_cfg.eps, gradient_ascent=loss_cfg.nnpu_gradient_ascent)
        if variant != "nnpu_only":
            idx_s = cyc_source.next_batch()
            mu_s, lv_s = encoder(x_source[idx_s])
            z_s = models.reparameterize(mu_s, lv_s, sample_gen)
            p_s = torch.softmax(head(z_s), dim=1)[:, 1]
            terms["cls"] = losses.source_ce_loss(p_s, y_source[idx_s], eps=loss_cfg.eps)
        if variant == "pu_da":
            terms["kl"] = losses.kl_prior_loss(mu_s, lv_s)
            z_prior = models.sample_prior(len(idx_u), config.d_z, sample_gen)
            terms["recon"] = losses.target_reconstruction_loss(
                decoder(z_u), decoder(z_prior))
            # feature-norm enlargement applies to both domains
            x_both = torch.cat([x_source[idx_s], x_unl[idx_u]])
            h_prev = models.feature_norm(encoder, head, x_both, snap=snap)
            h_curr = models.feature_norm(encoder, head, x_both)
            terms["safn"] = losses.safn_loss(h_prev, h_curr, loss_cfg.delta)
            align = losses.alignment_loss(terms["kl"], terms["recon"], terms["safn"])
            terms["total"] = losses.total_step1_loss(
                terms["pu"], terms["cls"], align, loss_cfg.alpha, loss_cfg.beta)
        elif variant == "source_only":
            terms["total"] = terms["cls"]
        else:
            terms["total"] = terms["pu"]
        return terms

    for epoch in range(1, config.step1_max_epoch + 1):
        thresholds = None
        if variant == "pu_da":
            thresholds = selector.compute_thresholds(
                predict_fn, scenario.target_positive, source_negatives, epoch)
            result.thresholds_trace.append(thresholds)
        sums: dict = {}
        for _ in range(steps_per_epoch):
            try:
                terms = compute_step_terms()
            except losses.LossError as exc:
                raise TrainingDivergedError(
                    f"loss became undefined at epoch {epoch}, step {global_step}: {exc}",
                    trace=result.loss_trace) from exc
            total = terms["total"]
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {global_step}",
                    trace=result.loss_trace)
            opt.zero_grad()
            total.backward()
            opt.step()
            global_step += 1
            if variant == "pu_da":
                snap = models.snapshot(encoder, head, tag=global_step)
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + float(value.detach())
        result.loss_trace.append(
            {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}})
        if variant == "pu_da" and epoch > config.warm_up:
            records = selector.harvest_epoch(
                predict_fn, scenario.target_unlabeled, thresholds, epoch)
            candidates.add(records)
            result.selector_trace.append(_harvest_quality(records, truth_by_id, epoch,
                                                          len(scenario.target_unlabeled)))
    return result


def _harvest_quality(records, truth_by_id, epoch, n_unlabeled) -> dict:
    """Oracle-side precision/recall of one epoch's harvest (evaluation metadata)."""
    n_correct = sum(1 for r in records
                    if (r.probability > 0.5) == bool(truth_by_id[r.example_id]))
    n = len(records)
    return {"epoch": epoch, "harvested": n,
            "precision": n_correct / n if n else float("nan"),
            "recall": n_correct / n_unlabeled}


def _make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)


def run_step2(pseudo: PseudoLabeledSet, scenario: ScenarioBundle,
              config: TrainConfig) -> tuple:
    """Train the final classifier C on the pseudo-labeled target subset.

    Returns (classifier, epochs_run). Stopping is either a fixed epoch count
    or patience on the held-out slice of the pseudo-labeled set.
    """
    if len(pseudo) == 0:
        raise ValueError("run_step2: empty pseudo-labeled set")
    torch.manual_seed(config.seed + 10)
    rng = np.random.default_rng(config.seed + 11)

    by_id = {ex.id: ex for ex in scenario.target_unlabeled}
    features = stack_features([by_id[e.example_id] for e in pseudo])
    targets = torch.tensor([e.pseudo_label for e in pseudo], dtype=torch.float32)

    arch = config.arch_config(features.shape[1:])
    final = FinalClassifier(arch)
    opt = _make_optimizer(final.parameters(), config)

    n = len(pseudo)
    if config.stopping == "patience" and n >= 2:
        n_hold = max(1, int(round(config.holdout_fraction * n)))
        order = rng.permutation(n)
        hold_idx, train_idx = order[:n_hold], order[n_hold:]
    else:
        train_idx = np.arange(n)
        hold_idx = None

    cyc = _Cycler(len(train_idx), config.batch_step2, rng)
    steps = math.ceil(len(train_idx) / cyc.batch)
    best_hold = float("inf")
    stale = 0
    epochs_run = 0
    for epoch in range(1, config.step2_max_epoch + 1):
        for _ in range(steps):
            idx = train_idx[cyc.next_batch()]
            p = torch.softmax(final(features[idx]), dim=1)[:, 1]
            loss = losses.pseudo_label_ce_loss(p, targets[idx], eps=config.eps,
                                               hard=not config.soft_pseudo_labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite step-2 loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        epochs_run = epoch
        if hold_idx is not None:
            with torch.no_grad():
                p = torch.softmax(final(features[hold_idx]), dim=1)[:, 1]
                hold = float(losses.pseudo_label_ce_loss(
                    p, targets[hold_idx], eps=config.eps,
                    hard=not config.soft_pseudo_labels))
            if hold < best_hold - 1e-12:
                best_hold = hold
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return final, epochs_run


@dataclass
class RunArtifacts:
    """Everything a finished run produced; enough to reproduce and audit it."""

    status: str  # "success" or "degraded"
    predictor: Predictor
    bundle: ModelBundle
    final: FinalClassifier | None
    candidates: CandidateSet
    pseudo: PseudoLabeledSet
    loss_trace: list
    thresholds_trace: list
    selector_trace: list
    step2_epochs: int
    config: TrainConfig


def run_pu_da(scenario: ScenarioBundle, config: TrainConfig) -> RunArtifacts:
    """Full two-step run; inference goes through the step-2 classifier.

    When extraction produces nothing the run falls back to the step-1
    encoder/head pair as the final predictor and is flagged as degraded.
    """
    step1 = run_step1(scenario, config, variant="pu_da")
    pseudo = selector.extract_pseudo_labels(step1.candidates, config.extraction_config())
    if len(pseudo) == 0:
        predictor = Predictor.from_encoder_head(step1.bundle.encoder, step1.bundle.head)
        return RunArtifacts(status="degraded", predictor=predictor, bundle=step1.bundle,
                            final=None, candidates=step1.candidates, pseudo=pseudo,
                            loss_trace=step1.loss_trace,
                            thresholds_trace=step1.thresholds_trace,
                            selector_trace=step1.selector_trace,
                            step2_epochs=0, config=config)
    final, epochs = run_step2(pseudo, scenario, config)
    return RunArtifacts(status="success", predictor=Predictor.from_final(final),
                        bundle=step1.bundle, final=final, candidates=step1.candidates,
                        pseudo=pseudo, loss_trace=step1.loss_trace,
                        thresholds_trace=step1.thresholds_trace,
                        selector_trace=step1.selector_trace,
                        step2_epochs=epochs, config=config)


def run_baseline(kind: str, scenario: ScenarioBundle, config: TrainConfig) -> Predictor:
    """source_only: cross entropy on the source pool alone.
    nnpu_only: the PU risk on the target pools alone."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    step1 = run_step1(scenario, config, variant=kind)
    return Predictor.from_encoder_head(step1.bundle.encoder, step1.bundle.head)


def train_supervised(examples, config: TrainConfig) -> Predictor:
    """Fully supervised reference on a labeled pool (oracle for tests and bounds)."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed + 2)
    x = stack_features(examples)
    y = stack_labels(examples)
    arch = config.arch_config(x.shape[1:])
    bundle = models.build_models(arch)
    opt = _make_optimizer(list(bundle.encoder.parameters())
                          + list(bundle.head.parameters()), config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    cyc = _Cycler(len(examples), config.batch_source, rng)
    steps = math.ceil(len(examples) / cyc.batch)
    for _ in range(1, config.step1_max_epoch + 1):
        for _ in range(steps):
            idx = cyc.next_batch()
            mu, lv = bundle.encoder(x[idx])
            z = models.reparameterize(mu, lv, gen)
            p = torch.softmax(bundle.head(z), dim=1)[:, 1]
            loss = losses.source_ce_loss(p, y[idx], eps=config.eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return Predictor.from_encoder_head(bundle.encoder, bundle.head)


def evaluate_predictor(predictor: Predictor, scenario: ScenarioBundle,
                       method: str, seed: int):
    """Score a predictor on the evaluation pool (labeled ids excluded)."""
    from .evaluation import RunResult, accuracy, balanced_accuracy

    pool = scenario.evaluation_pool()
    preds = predictor.predict(pool)
    truths = np.array([ex.true_label for ex in pool])
    return RunResult(method=method, scenario=scenario.name, c=scenario.label_frequency,
                     seed=seed, accuracy=accuracy(preds, truths),
                     balanced_accuracy=balanced_accuracy(preds, truths),
                     n_eval=len(pool))
