"""Optimization loop: Adam/SGD with optional decoupled weight decay,
per-step loss composition, center updates, metric logging, and the
gradient-check suite that validates every loss against finite differences.
"""

from __future__ import annotations

import configparser
import io
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import BatchPlan, Dataset, SyntheticDatasetSpec, generate, next_batch
from .errors import ConfigInconsistency, NonFiniteLoss, ShapeMismatch
from .losses import (
    AmSoftmaxParams,
    CenterStore,
    EmbeddingBatch,
    Ge2eParams,
    LossComposite,
    am_softmax_loss,
    between_class_loss,
    center_loss,
    center_update,
    compose,
    composite_terms,
    ge2e_loss,
    hard_negative_loss,
    softmax_loss,
)
from .model import (
    ClassifierHead,
    MlpEncoder,
    encoder_backward,
    encoder_forward,
    save_checkpoint,
)
from .numeric import (
    derive_rng,
    finite_difference_gradient,
    make_rng,
    relative_gradient_error,
)

GE2E_W_FLOOR = 1e-6

HEAD_LOSSES = frozenset({"softmax", "amsoftmax", "between_class", "hard_negative"})


@dataclass
class LossConfig:
    """Loss composite plus every per-loss hyper-parameter."""

    composite: LossComposite
    center_lambda: float = 0.001
    center_alpha: float = 0.5
    am_scale: float = 5.0
    am_margin: float = 0.35
    top_h: int = 100
    ge2e_w_init: float = 10.0
    ge2e_b_init: float = -5.0
    use_bias: bool | None = None  # None derives: bias only when softmax is present

    def resolved_use_bias(self) -> bool:
        if self.use_bias is not None:
            return self.use_bias
        return self.composite.uses("softmax")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = True

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigInconsistency(f"optimizer.kind must be adam or sgd, got {self.kind!r}")
        if self.weight_decay < 0.0:
            raise ConfigInconsistency("optimizer.weight_decay must be >= 0")


@dataclass
class OptimizerState:
    config: OptimizerConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def create(cls, config: OptimizerConfig, params: dict[str, np.ndarray]) -> "OptimizerState":
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(config=config, m=m, v=v)


def adam_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    decay_keys: frozenset[str] | set[str] = frozenset(),
) -> None:
    """One optimizer step, updating params in place.

    Adam uses the standard bias-corrected moment estimates. Decoupled weight
    decay shrinks the listed keys by lr*wd after the gradient step; coupled
    mode adds wd*theta to their gradients instead. Deterministic: no
    randomness, fixed iteration order.
    """
    cfg = state.config
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        decayed = cfg.weight_decay > 0.0 and name in decay_keys
        if decayed and not cfg.decoupled:
            g = g + cfg.weight_decay * p
        if cfg.kind == "adam":
            m = state.m[name]
            v = state.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        else:
            p -= cfg.learning_rate * g
        if decayed and cfg.decoupled:
            p -= cfg.learning_rate * cfg.weight_decay * p


@dataclass
class RunConfig:
    dataset: SyntheticDatasetSpec
    plan: BatchPlan
    loss: LossConfig
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    encoder_hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    leaky_slope: float = 0.01
    normalize_eval: bool = False
    total_steps: int = 2000
    eval_interval: int = 0
    seed: int = 0
    output_dir: str | None = None

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ConfigInconsistency("run.total_steps must be >= 0")
        if self.loss.composite.uses("ge2e"):
            if self.plan.mode != "grouped":
                raise ConfigInconsistency(
                    "loss 'ge2e' compares utterances against per-speaker centroids and "
                    "requires the speaker-grouped batch plan (batch.mode = grouped)"
                )
            if self.plan.speakers_per_batch < 2:
                raise ConfigInconsistency(
                    "loss 'ge2e' needs at least 2 speakers per batch"
                )
        if self.loss.composite.uses("hard_negative") and self.loss.top_h < 1:
            raise ConfigInconsistency("losses.top_h must be >= 1 for hard_negative")
        if not self.encoder_hidden_dims:
            raise ConfigInconsistency("model.encoder_hidden_dims must be non-empty")

    @property
    def layer_dims(self) -> list[int]:
        return [self.dataset.feature_dim] + list(self.encoder_hidden_dims)

    def to_ini_text(self) -> str:
        """Flat key-value provenance record; output paths are deliberately excluded."""
        cp = configparser.ConfigParser()
        ds = self.dataset
        cp["dataset"] = {
            "n_speakers": str(ds.n_speakers),
            "utterances_per_speaker": str(ds.utterances_per_speaker),
            "feature_dim": str(ds.feature_dim),
            "speaker_spread": repr(float(ds.speaker_spread)),
            "utterance_noise": repr(float(ds.utterance_noise)),
            "seed": str(ds.seed),
            "disjoint_eval_speakers": str(ds.disjoint_eval_speakers),
        }
        cp["batch"] = {
            "mode": self.plan.mode,
            "batch_size": str(self.plan.batch_size),
            "utterances_per_speaker_in_batch": str(self.plan.utterances_per_speaker_in_batch),
            "seed": str(self.plan.seed),
        }
        cp["model"] = {
            "encoder_hidden_dims": ", ".join(str(d) for d in self.encoder_hidden_dims),
            "leaky_slope": repr(float(self.leaky_slope)),
            "use_bias": str(self.loss.resolved_use_bias()),
            "normalize_eval": str(self.normalize_eval),
        }
        lc = self.loss
        cp["losses"] = {
            "losses": ", ".join(f"{n}:{repr(float(w))}" for n, w in lc.composite.items),
            "center_lambda": repr(float(lc.center_lambda)),
            "center_alpha": repr(float(lc.center_alpha)),
            "am_scale": repr(float(lc.am_scale)),
            "am_margin": repr(float(lc.am_margin)),
            "top_h": str(lc.top_h),
            "ge2e_w_init": repr(float(lc.ge2e_w_init)),
            "ge2e_b_init": repr(float(lc.ge2e_b_init)),
        }
        oc = self.optimizer
        cp["optimizer"] = {
            "kind": oc.kind,
            "learning_rate": repr(float(oc.learning_rate)),
            "beta1": repr(float(oc.beta1)),
            "beta2": repr(float(oc.beta2)),
            "eps": repr(float(oc.eps)),
            "weight_decay": repr(float(oc.weight_decay)),
            "decoupled": str(oc.decoupled),
        }
        cp["run"] = {
            "total_steps": str(self.total_steps),
            "eval_interval": str(self.eval_interval),
            "seed": str(self.seed),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        d = cp["dataset"]
        dataset = SyntheticDatasetSpec(
            n_speakers=d.getint("n_speakers"),
            utterances_per_speaker=d.getint("utterances_per_speaker"),
            feature_dim=d.getint("feature_dim"),
            speaker_spread=d.getfloat("speaker_spread"),
            utterance_noise=d.getfloat("utterance_noise"),
            seed=d.getint("seed"),
            disjoint_eval_speakers=d.getboolean("disjoint_eval_speakers", fallback=False),
        )
        b = cp["batch"]
        plan = BatchPlan(
            mode=b.get("mode"),
            batch_size=b.getint("batch_size"),
            utterances_per_speaker_in_batch=b.getint("utterances_per_speaker_in_batch", fallback=1),
            seed=b.getint("seed"),
        )
        m = cp["model"]
        lo = cp["losses"]
        items = []
        for part in lo.get("losses").split(","):
            name, _, weight = part.strip().partition(":")
            items.append((name.strip(), float(weight) if weight else 1.0))
        loss = LossConfig(
            composite=LossComposite(items),
            center_lambda=lo.getfloat("center_lambda", fallback=0.001),
            center_alpha=lo.getfloat("center_alpha", fallback=0.5),
            am_scale=lo.getfloat("am_scale", fallback=5.0),
            am_margin=lo.getfloat("am_margin", fallback=0.35),
            top_h=lo.getint("top_h", fallback=100),
            ge2e_w_init=lo.getfloat("ge2e_w_init", fallback=10.0),
            ge2e_b_init=lo.getfloat("ge2e_b_init", fallback=-5.0),
            use_bias=m.getboolean("use_bias", fallback=None),
        )
        o = cp["optimizer"]
        optimizer = OptimizerConfig(
            kind=o.get("kind", fallback="adam"),
            learning_rate=o.getfloat("learning_rate", fallback=0.001),
            beta1=o.getfloat("beta1", fallback=0.9),
            beta2=o.getfloat("beta2", fallback=0.999),
            eps=o.getfloat("eps", fallback=1e-8),
            weight_decay=o.getfloat("weight_decay", fallback=0.0),
            decoupled=o.getboolean("decoupled", fallback=True),
        )
        r = cp["run"]
        return cls(
            dataset=dataset,
            plan=plan,
            loss=loss,
            optimizer=optimizer,
            encoder_hidden_dims=[int(x) for x in m.get("encoder_hidden_dims").split(",")],
            leaky_slope=m.getfloat("leaky_slope", fallback=0.01),
            normalize_eval=m.getboolean("normalize_eval", fallback=False),
            total_steps=r.getint("total_steps"),
            eval_interval=r.getint("eval_interval", fallback=0),
            seed=r.getint("seed"),
        )


@dataclass
class StepRecord:
    step: int
    values: dict[str, float]
    total: float
    grad_norms: dict[str, float]
    wall_time: float  # in-memory only; excluded from the metric log

    def log_line(self) -> str:
        return json.dumps(
            {
                "record": "step",
                "step": self.step,
                "losses": self.values,
                "total": self.total,
                "grad_norms": self.grad_norms,
            }
        )


@dataclass
class TrainResult:
    encoder: MlpEncoder
    head: ClassifierHead
    centers: CenterStore | None
    ge2e: Ge2eParams | None
    records: list[StepRecord]
    config: RunConfig


def build_model(cfg: RunConfig) -> tuple[MlpEncoder, ClassifierHead]:
    """Deterministic initialization from cfg.seed: encoder layers first, then head."""
    rng = make_rng(cfg.seed)
    enc = MlpEncoder.initialize(cfg.layer_dims, rng, leaky_slope=cfg.leaky_slope)
    head = ClassifierHead.initialize(
        enc.embedding_dim, cfg.dataset.n_speakers, rng, use_bias=cfg.loss.resolved_use_bias()
    )
    return enc, head


def _grad_norm(arrs) -> float:
    total = 0.0
    for a in arrs:
        total += float(np.sum(np.asarray(a) ** 2))
    return float(np.sqrt(total))


def train(cfg: RunConfig, dataset: Dataset | None = None, callback=None) -> TrainResult:
    """Run the full optimization loop; deterministic in the config's seeds.

    Per step: sample batch, encode, compose losses, backpropagate, optimizer
    step (weight decay on weight matrices only), clamp the score scale, then
    the non-gradient center update when the center loss is active. Aborts
    with NonFiniteLoss on the first non-finite loss value, gradient, or
    parameter, leaving the last finite state in the result files.

    Args:
        cfg: validated run configuration.
        dataset: pre-generated dataset; defaults to generate(cfg.dataset).
        callback: optional fn(step, encoder, head, centers), called every
            cfg.eval_interval steps when the interval is positive.
    """
    cfg.validate()
    ds = dataset if dataset is not None else generate(cfg.dataset)
    if ds.feature_dim != cfg.dataset.feature_dim:
        raise ConfigInconsistency(
            f"dataset feature_dim {ds.feature_dim} != configured {cfg.dataset.feature_dim}"
        )
    enc, head = build_model(cfg)
    comp = cfg.loss.composite
    use_center = comp.uses("center")
    use_ge2e = comp.uses("ge2e")
    use_head = any(comp.uses(n) for n in HEAD_LOSSES)

    centers = (
        CenterStore.initialize(
            cfg.dataset.n_speakers,
            enc.embedding_dim,
            alpha=cfg.loss.center_alpha,
            lam=cfg.loss.center_lambda,
        )
        if use_center
        else None
    )
    ge2e_arr = np.array([cfg.loss.ge2e_w_init, cfg.loss.ge2e_b_init]) if use_ge2e else None

    params: dict[str, np.ndarray] = {}
    for l in range(len(enc.weights)):
        params[f"encoder.weight.{l}"] = enc.weights[l]
        params[f"encoder.bias.{l}"] = enc.biases[l]
    decay_keys = {f"encoder.weight.{l}" for l in range(len(enc.weights))}
    if use_head:
        params["head.basis"] = head.basis
        decay_keys.add("head.basis")
        if head.use_bias and comp.uses("softmax"):
            params["head.bias"] = head.bias
    if use_ge2e:
        params["ge2e.scalars"] = ge2e_arr
    state = OptimizerState.create(cfg.optimizer, params)

    am = AmSoftmaxParams(scale=cfg.loss.am_scale, margin=cfg.loss.am_margin)
    records: list[StepRecord] = []
    last_good = {k: p.copy() for k, p in params.items()}

    def fail(step: int, what: str):
        for k, p in params.items():
            p[...] = last_good[k]
        _write_outputs(cfg, enc, head, centers, ge2e_arr, records, step)
        raise NonFiniteLoss(f"{what} at step {step}; aborting with last good state", step=step)

    for step in range(cfg.total_steps):
        t0 = time.perf_counter()
        batch = next_batch(cfg.plan, ds, step)
        emb, trace = encoder_forward(enc, batch.features)
        eb = EmbeddingBatch(emb, batch.labels)
        ge2e_params = (
            Ge2eParams(w_score=float(ge2e_arr[0]), b_score=float(ge2e_arr[1]))
            if use_ge2e
            else None
        )
        terms = composite_terms(
            comp, batch=eb, head=head, centers=centers, am=am, ge2e=ge2e_params,
            top_h=cfg.loss.top_h,
        )
        values = {name: out.value for name, _, out in terms}
        total = sum(w * out.value for _, w, out in terms)
        if not np.isfinite(total):
            fail(step, f"non-finite loss {total!r}")

        grad_emb = None
        grad_basis = None
        grad_bias = None
        grad_scalars = np.zeros(2)
        for _, w, out in terms:
            if out.grad_embeddings is not None:
                grad_emb = (0.0 if grad_emb is None else grad_emb) + w * out.grad_embeddings
            if out.grad_basis is not None:
                grad_basis = (0.0 if grad_basis is None else grad_basis) + w * out.grad_basis
            if out.grad_bias is not None:
                grad_bias = (0.0 if grad_bias is None else grad_bias) + w * out.grad_bias
            if out.grad_scalars is not None:
                grad_scalars[0] += w * out.grad_scalars["w_score"]
                grad_scalars[1] += w * out.grad_scalars["b_score"]
        if grad_emb is None:
            grad_emb = np.zeros_like(emb)
        enc_grads = encoder_backward(enc, trace, grad_emb)

        grads: dict[str, np.ndarray] = {}
        for l in range(len(enc.weights)):
            grads[f"encoder.weight.{l}"] = enc_grads.weights[l]
            grads[f"encoder.bias.{l}"] = enc_grads.biases[l]
        if use_head:
            grads["head.basis"] = grad_basis if grad_basis is not None else np.zeros_like(head.basis)
            if "head.bias" in params:
                grads["head.bias"] = grad_bias if grad_bias is not None else np.zeros_like(head.bias)
        if use_ge2e:
            grads["ge2e.scalars"] = grad_scalars

        norms = {
            "embeddings": _grad_norm([grad_emb]),
            "encoder": _grad_norm(enc_grads.weights + enc_grads.biases),
        }
        if use_head:
            norms["head"] = _grad_norm(
                [grads["head.basis"]] + ([grads["head.bias"]] if "head.bias" in grads else [])
            )
        if use_ge2e:
            norms["scalars"] = _grad_norm([grad_scalars])
        if not all(np.isfinite(v) for v in norms.values()):
            fail(step, "non-finite gradient")

        for k, p in params.items():
            last_good[k][...] = p
        adam_step(state, params, grads, decay_keys=decay_keys)
        if use_ge2e and ge2e_arr[0] < GE2E_W_FLOOR:
            ge2e_arr[0] = GE2E_W_FLOOR
        if any(not np.isfinite(p).all() for p in params.values()):
            fail(step, "non-finite parameter after update")
        if use_center:
            centers = center_update(centers, eb)

        records.append(
            StepRecord(
                step=step,
                values=values,
                total=float(total),
                grad_norms=norms,
                wall_time=time.perf_counter() - t0,
            )
        )
        if callback is not None and cfg.eval_interval > 0 and (step + 1) % cfg.eval_interval == 0:
            callback(step, enc, head, centers)

    _write_outputs(cfg, enc, head, centers, ge2e_arr, records, cfg.total_steps)
    ge2e_final = (
        Ge2eParams(w_score=float(ge2e_arr[0]), b_score=float(ge2e_arr[1])) if use_ge2e else None
    )
    return TrainResult(
        encoder=enc, head=head, centers=centers, ge2e=ge2e_final, records=records, config=cfg
    )


def _write_outputs(cfg, enc, head, centers, ge2e_arr, records, step) -> None:
    if cfg.output_dir is None:
        return
    os.makedirs(cfg.output_dir, exist_ok=True)
    ini = cfg.to_ini_text()
    with open(os.path.join(cfg.output_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(ini)
    with open(os.path.join(cfg.output_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"record": "run", "seed": cfg.seed, "config_ini": ini}) + "\n")
        for rec in records:
            fh.write(rec.log_line() + "\n")
    extras: dict[str, np.ndarray] = {}
    if centers is not None:
        extras["centers"] = centers.centers
    if ge2e_arr is not None:
        extras["ge2e_scalars"] = ge2e_arr
    save_checkpoint(
        os.path.join(cfg.output_dir, "checkpoint.bin"),
        enc,
        head,
        seed=cfg.seed,
        step=step,
        config_text=ini,
        extras=extras,
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

GRADCHECK_TOLERANCE = 1e-6
GRADCHECK_CONFIGS = 10
_GC_M, _GC_D, _GC_N = 6, 8, 5  # utterances, embedding dim, speakers
_BOUNDARY_GAP = 1e-4  # min separation from argmax/top-H decision flips


@dataclass
class GradcheckEntry:
    loss: str
    max_rel_err: float
    n_configs: int
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


@dataclass
class GradcheckReport:
    seed: int
    entries: list[GradcheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def render(self) -> str:
        lines = [f"gradient check (seed {self.seed}, h=1e-6, {GRADCHECK_CONFIGS} configs per loss)"]
        for e in self.entries:
            status = "PASS" if e.passed else "FAIL"
            lines.append(
                f"  {e.loss:<14} max_rel_err={e.max_rel_err:.3e}  tol={e.tolerance:.0e}  {status}"
            )
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def _pack(*arrays):
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def _split(theta, shapes):
    out = []
    i = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(theta[i : i + size].reshape(shape))
        i += size
    return out


def _gc_case(loss_name: str, rng: np.random.Generator):
    """Build (f, analytic_grad, theta0) for one random configuration.

    f maps a flat parameter vector to the loss value; analytic_grad is the
    flattened analytic gradient at theta0, in the same packing order.
    """
    m, d, n = _GC_M, _GC_D, _GC_N
    labels = np.arange(m) % n if loss_name != "ge2e" else np.repeat(np.arange(3), 2)

    if loss_name == "softmax":
        e0, w0, b0 = rng.normal(size=(m, d)), rng.normal(size=(d, n)), rng.normal(size=n)
        shapes = [(m, d), (d, n), (n,)]

        def f(theta):
            e, w, b = _split(theta, shapes)
            out = softmax_loss(EmbeddingBatch(e, labels), ClassifierHead(w, b, use_bias=True))
            return out.value

        out = softmax_loss(EmbeddingBatch(e0, labels), ClassifierHead(w0, b0, use_bias=True))
        return f, _pack(out.grad_embeddings, out.grad_basis, out.grad_bias), _pack(e0, w0, b0)

    if loss_name == "center":
        e0 = rng.normal(size=(m, d))
        store = CenterStore(rng.normal(size=(n, d)), alpha=0.5, lam=float(rng.uniform(0.1, 1.0)))

        def f(theta):
            return center_loss(EmbeddingBatch(theta.reshape(m, d), labels), store).value

        out = center_loss(EmbeddingBatch(e0, labels), store)
        return f, _pack(out.grad_embeddings), _pack(e0)

    if loss_name == "amsoftmax":
        e0, w0 = rng.normal(size=(m, d)), rng.normal(size=(d, n))
        params = AmSoftmaxParams(scale=5.0, margin=0.35)
        shapes = [(m, d), (d, n)]

        def f(theta):
            e, w = _split(theta, shapes)
            head = ClassifierHead(w, np.zeros(n), use_bias=False)
            return am_softmax_loss(EmbeddingBatch(e, labels), head, params).value

        head0 = ClassifierHead(w0, np.zeros(n), use_bias=False)
        out = am_softmax_loss(EmbeddingBatch(e0, labels), head0, params)
        return f, _pack(out.grad_embeddings, out.grad_basis), _pack(e0, w0)

    if loss_name == "ge2e":
        while True:
            e0 = rng.normal(size=(m, d))
            wb0 = np.array([rng.uniform(0.5, 2.0), rng.uniform(-0.5, 0.5)])
            params = Ge2eParams(w_score=wb0[0], b_score=wb0[1])
            # stay away from argmax ties: the top two negative scores per
            # utterance must differ by more than the boundary gap
            uniq, inv = np.unique(labels, return_inverse=True)
            cent = np.zeros((uniq.size, d))
            np.add.at(cent, inv, e0)
            cent /= np.bincount(inv)[:, None]
            from .model import cosine_matrix

            c, _ = cosine_matrix(e0, cent)
            s = wb0[0] * c + wb0[1]
            s[np.arange(m), inv] = -np.inf
            srt = np.sort(s, axis=1)
            if np.all(srt[:, -1] - srt[:, -2] > _BOUNDARY_GAP):
                break
        shapes = [(m, d), (2,)]

        def f(theta):
            e, wb = _split(theta, shapes)
            return ge2e_loss(EmbeddingBatch(e, labels), Ge2eParams(wb[0], wb[1])).value

        out = ge2e_loss(EmbeddingBatch(e0, labels), params)
        g_sc = np.array([out.grad_scalars["w_score"], out.grad_scalars["b_score"]])
        return f, _pack(out.grad_embeddings, g_sc), _pack(e0, wb0)

    if loss_name == "between_class":
        w0 = rng.normal(size=(d, n))

        def f(theta):
            return between_class_loss(
                ClassifierHead(theta.reshape(d, n), np.zeros(n), use_bias=False)
            ).value

        out = between_class_loss(ClassifierHead(w0, np.zeros(n), use_bias=False))
        return f, _pack(out.grad_basis), _pack(w0)

    if loss_name == "hard_negative":
        h = 2
        while True:
            e0, w0 = rng.normal(size=(m, d)), rng.normal(size=(d, n))
            # stay away from top-H reshuffles: the h-th and (h+1)-th negative
            # cosines must be separated for every utterance
            from .model import cosine_matrix

            c, _ = cosine_matrix(e0, w0.T)
            c[np.arange(m), labels] = -np.inf
            srt = np.sort(c, axis=1)
            if np.all(srt[:, -h] - srt[:, -h - 1] > _BOUNDARY_GAP):
                break
        shapes = [(m, d), (d, n)]

        def f(theta):
            e, w = _split(theta, shapes)
            head = ClassifierHead(w, np.zeros(n), use_bias=False)
            return hard_negative_loss(EmbeddingBatch(e, labels), head, h).value

        head0 = ClassifierHead(w0, np.zeros(n), use_bias=False)
        out = hard_negative_loss(EmbeddingBatch(e0, labels), head0, h)
        return f, _pack(out.grad_embeddings, out.grad_basis), _pack(e0, w0)

    raise ValueError(f"unknown loss {loss_name!r}")


def gradcheck_suite(seed: int, h: float = 1e-6) -> GradcheckReport:
    """Check every loss's analytic gradient against central finite differences.

    Runs GRADCHECK_CONFIGS seeded random configurations per loss and reports
    the max relative error |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-12) over each
    loss. Passing means every loss stays within GRADCHECK_TOLERANCE.
    """
    from .losses import LOSS_NAMES

    entries = []
    for li, name in enumerate(LOSS_NAMES):
        worst = 0.0
        for c in range(GRADCHECK_CONFIGS):
            rng = derive_rng(seed, li, c)
            f, analytic, theta0 = _gc_case(name, rng)
            fd = finite_difference_gradient(f, theta0, h=h)
            worst = max(worst, relative_gradient_error(analytic, fd))
        entries.append(GradcheckEntry(loss=name, max_rel_err=worst, n_configs=GRADCHECK_CONFIGS))
    return GradcheckReport(seed=seed, entries=entries)
