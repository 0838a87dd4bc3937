"""The learned visitation reward: encoder, SR head, predictor, and losses.

The model encodes a state into a nonnegative L1-normalized feature vector,
concatenates the action, and pushes that through the SR head to produce a
vector of expected discounted future feature occupancies. The reward is the
L2 norm of that vector. Training combines four terms per batch:

  bellman     - squared TD error of the SR head against a Polyak-averaged
                target head (target fully stop-gradient, gamma masked on
                terminal rows),
  prediction  - auxiliary task: predict the (stop-gradient) next encoding
                from the current encoding and action,
  magnitude   - quadratic penalty on rewards exceeding 1,
  neg_sample  - rewards of Gaussian-perturbed state-action pairs regressed
                toward an exponentially decayed, stop-gradient fraction of
                the paired dataset reward.

All stop-gradient targets are frozen as constants before the graph is built,
so finite-difference checks of the total loss are exact and training gradients
match them by construction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import nnkit
from .dataset import DemoDataset, Trajectory, Transition, sample_indices
from .errors import ConfigurationError, ContractViolation, TrainingError, ValidationError
from .nnkit import (
    AdamState,
    MLPSpec,
    ParamSet,
    Tensor,
    adam_step,
    clone_params,
    eval_with_grads,
    init_mlp_params,
    l1_normalize,
    l2_norm,
    mean_,
    mlp_forward,
    mlp_forward_array,
    mul,
    polyak_update,
    relu,
    row_sumsq,
)

Array = np.ndarray

CHECKPOINT_VERSION = 1


@dataclass
class SRHyper:
    """Training hyperparameters. beta/sigma defaults follow the paper's
    locomotion table; experiment configs usually override them from data
    (beta = median dimension std, sigma = 5 * beta)."""

    gamma: float = 0.99
    beta: float = 1.0
    sigma: float = 3.0
    lr_sr: float = 1e-4
    pretrain_steps: int = 10_000
    batch_size: int = 128
    target_update: float = 0.005
    ns_enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.beta <= 0 or self.sigma <= 0:
            raise ConfigurationError("beta and sigma must be positive")
        if not 0.0 <= self.target_update <= 1.0:
            raise ConfigurationError("target_update must be in [0, 1]")


@dataclass(frozen=True)
class SRModel:
    """Encoder, SR head, predictor, and the shadow target head."""

    d_s: int
    d_a: int
    d_phi: int
    encoder_spec: MLPSpec
    encoder: ParamSet
    sr_spec: MLPSpec
    sr_head: ParamSet
    predictor_spec: MLPSpec
    predictor: ParamSet
    target_sr_head: ParamSet


def init_sr_model(d_s: int, d_a: int, d_phi: int, rng: np.random.Generator,
                  encoder_hidden=(256, 128), sr_hidden=(128,),
                  predictor_hidden=(128, 32)) -> SRModel:
    """Fresh model; encoder ends in relu (then L1-normalized in encode)."""
    enc_spec = MLPSpec((d_s, *encoder_hidden, d_phi), output_activation="relu")
    sr_spec = MLPSpec((d_phi + d_a, *sr_hidden, d_phi + d_a))
    pred_spec = MLPSpec((d_phi + d_a, *predictor_hidden, d_phi))
    sr_params = init_mlp_params(sr_spec, rng)
    return SRModel(
        d_s=d_s, d_a=d_a, d_phi=d_phi,
        encoder_spec=enc_spec, encoder=init_mlp_params(enc_spec, rng),
        sr_spec=sr_spec, sr_head=sr_params,
        predictor_spec=pred_spec, predictor=init_mlp_params(pred_spec, rng),
        target_sr_head=clone_params(sr_params),
    )


def one_hot_encoder_model(n_states: int, n_actions: int, rng: np.random.Generator,
                          sr_hidden=(128,)) -> SRModel:
    """Model whose encoder passes one-hot states through unchanged.

    Single affine layer with identity weights, zero bias, relu output: on
    one-hot inputs the L1 normalization is a no-op, so phi(s) == s exactly.
    Used by the tabular consistency oracle.
    """
    enc_spec = MLPSpec((n_states, n_states), output_activation="relu")
    enc = {
        "W0": Tensor(np.eye(n_states), requires_grad=True),
        "b0": Tensor(np.zeros(n_states), requires_grad=True),
    }
    sr_spec = MLPSpec((n_states + n_actions, *sr_hidden, n_states + n_actions))
    pred_spec = MLPSpec((n_states + n_actions, n_states))
    sr_params = init_mlp_params(sr_spec, rng)
    return SRModel(
        d_s=n_states, d_a=n_actions, d_phi=n_states,
        encoder_spec=enc_spec, encoder=enc,
        sr_spec=sr_spec, sr_head=sr_params,
        predictor_spec=pred_spec, predictor=init_mlp_params(pred_spec, rng),
        target_sr_head=clone_params(sr_params),
    )


# -- forward passes -------------------------------------------------------

def _l1_normalize_array(x: Array) -> Array:
    s = x.sum(axis=-1, keepdims=True)
    return x / np.maximum(s, 1e-8)


def encode_array(model: SRModel, s: Array, params: ParamSet | None = None) -> Array:
    out = mlp_forward_array(model.encoder_spec, params or model.encoder, np.asarray(s, dtype=np.float64))
    return _l1_normalize_array(out)


def encode(model: SRModel, s) -> Array:
    """Nonnegative feature vector with unit L1 mass (guarded at zero)."""
    return encode_array(model, s)


def encode_graph(model: SRModel, params: ParamSet, s: Array, prefix: str) -> Tensor:
    return l1_normalize(mlp_forward(model.encoder_spec, params, s, prefix=prefix))


def phi_sa(model: SRModel, s, a) -> Array:
    """Concatenation [phi(s); a]; the action passes through verbatim."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1] != model.d_s or a.shape[-1] != model.d_a:
        raise ContractViolation(f"dims ({s.shape[-1]}, {a.shape[-1]}) do not match model "
                                f"({model.d_s}, {model.d_a})")
    return np.concatenate([encode_array(model, s), a], axis=-1)


def sr_vector(model: SRModel, s, a, params: ParamSet | None = None) -> Array:
    """SR head output for (s, a); un-normalized by design."""
    return mlp_forward_array(model.sr_spec, params or model.sr_head, phi_sa(model, s, a))


def reward(model: SRModel, s, a) -> float | Array:
    """Scalar reward = L2 norm of the SR vector; always nonnegative."""
    m = sr_vector(model, s, a)
    return np.sqrt((m * m).sum(axis=-1))


def make_negative_sample(s: Array, a: Array, beta: float,
                         rng: np.random.Generator) -> tuple[Array, Array]:
    """Gaussian-perturbed copies of (s, a), std beta per dimension."""
    if beta <= 0:
        raise ValidationError("beta must be positive")
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return s + rng.normal(0.0, beta, size=s.shape), a + rng.normal(0.0, beta, size=a.shape)


def alpha_decay(model: SRModel, s, a, s_tilde, a_tilde, sigma: float) -> float | Array:
    """exp(-d / sigma^2), d the L2 distance in concatenated feature-action space."""
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    d = phi_sa(model, s, a) - phi_sa(model, s_tilde, a_tilde)
    dist = np.sqrt((d * d).sum(axis=-1))
    return np.exp(-dist / (sigma * sigma))


def trajectory_return(model: SRModel, traj: Trajectory) -> float:
    """Undiscounted sum of per-step rewards along the trajectory."""
    return float(np.sum(reward(model, traj.states[:-1], traj.actions)))


# -- losses ---------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    bellman: float
    prediction: float
    magnitude: float
    neg_sample: float

    @property
    def total(self) -> float:
        return self.bellman + self.prediction + self.magnitude + self.neg_sample

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in
                   (self.bellman, self.prediction, self.magnitude, self.neg_sample))

    def as_dict(self) -> dict:
        return {"bellman": self.bellman, "prediction": self.prediction,
                "magnitude": self.magnitude, "neg_sample": self.neg_sample,
                "total": self.total}


@dataclass(frozen=True)
class NegativeBatch:
    """Perturbed samples and their current reward estimates, reused by the
    RL batch augmentation."""

    s: Array
    a: Array
    rewards: Array


def _stack_batch(batch) -> tuple[Array, Array, Array, Array, Array]:
    if isinstance(batch, tuple):
        s, a, s2, a2, term = batch
        return (np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64),
                np.asarray(s2, dtype=np.float64), np.asarray(a2, dtype=np.float64),
                np.asarray(term, dtype=bool))
    if not batch:
        raise ContractViolation("batch must be nonempty")
    return (np.stack([t.s for t in batch]), np.stack([t.a for t in batch]),
            np.stack([t.s_next for t in batch]), np.stack([t.a_next for t in batch]),
            np.asarray([t.terminal for t in batch], dtype=bool))


def merged_params(model: SRModel) -> ParamSet:
    out: ParamSet = {}
    for prefix, group in (("enc.", model.encoder), ("sr.", model.sr_head),
                          ("pred.", model.predictor)):
        for name, p in group.items():
            out[prefix + name] = p
    return dict(sorted(out.items()))


def _split_params(merged: ParamSet) -> tuple[ParamSet, ParamSet, ParamSet]:
    enc = {k[4:]: v for k, v in merged.items() if k.startswith("enc.")}
    sr = {k[3:]: v for k, v in merged.items() if k.startswith("sr.")}
    pred = {k[5:]: v for k, v in merged.items() if k.startswith("pred.")}
    return enc, sr, pred


@dataclass(frozen=True)
class _StepData:
    """Batch arrays plus every stop-gradient constant, frozen up front."""

    s: Array
    a: Array
    bellman_target: Array   # phi(s,a) + gamma * (1-terminal) * target_head(phi(s'), a')
    phi_next: Array         # prediction target
    neg_s: Array | None
    neg_a: Array | None
    neg_target: Array | None  # alpha_decay * reward(s, a), all constant


def _prepare_step(model: SRModel, batch, hyper: SRHyper,
                  rng: np.random.Generator | None) -> _StepData:
    s, a, s2, a2, term = _stack_batch(batch)
    if len(s) == 0:
        raise ContractViolation("batch must be nonempty")
    phi_s = encode_array(model, s)
    phi_s2 = encode_array(model, s2)
    m_target = mlp_forward_array(model.sr_spec, model.target_sr_head,
                                 np.concatenate([phi_s2, a2], axis=-1))
    mask = (1.0 - term.astype(np.float64))[:, None]
    bellman_target = np.concatenate([phi_s, a], axis=-1) + hyper.gamma * mask * m_target
    neg_s = neg_a = neg_target = None
    if hyper.ns_enabled:
        if rng is None:
            raise ConfigurationError("negative sampling requires an rng")
        neg_s, neg_a = make_negative_sample(s, a, hyper.beta, rng)
        alpha = alpha_decay(model, s, a, neg_s, neg_a, hyper.sigma)
        r_data = reward(model, s, a)
        neg_target = alpha * r_data
    return _StepData(s=s, a=a, bellman_target=bellman_target, phi_next=phi_s2,
                     neg_s=neg_s, neg_a=neg_a, neg_target=neg_target)


def _loss_graph(model: SRModel, params: ParamSet, data: _StepData,
                out_terms: dict | None = None) -> Tensor:
    """Differentiable total loss over the merged ParamSet; the frozen targets
    in `data` are constants."""
    phi = encode_graph(model, params, data.s, prefix="enc.")
    phisa = nnkit.concat([phi, Tensor(data.a)])
    m = mlp_forward(model.sr_spec, params, phisa, prefix="sr.")
    bell = mean_(row_sumsq(m - Tensor(data.bellman_target)))
    pred = mlp_forward(model.predictor_spec, params, phisa, prefix="pred.")
    pred_loss = mean_(row_sumsq(pred - Tensor(data.phi_next)))
    r = l2_norm(m)
    excess = relu(r - 1.0)
    mag = mean_(mul(excess, excess))
    total = bell + pred_loss + mag
    neg_rewards = None
    if data.neg_s is not None:
        phi_t = encode_graph(model, params, data.neg_s, prefix="enc.")
        m_t = mlp_forward(model.sr_spec, params, nnkit.concat([phi_t, Tensor(data.neg_a)]),
                          prefix="sr.")
        r_t = l2_norm(m_t)
        neg_rewards = r_t.data
        diff = r_t - Tensor(data.neg_target)
        neg = mean_(mul(diff, diff))
        total = total + neg
    if out_terms is not None:
        out_terms["bellman"] = bell.item()
        out_terms["prediction"] = pred_loss.item()
        out_terms["magnitude"] = mag.item()
        out_terms["neg_sample"] = neg.item() if data.neg_s is not None else 0.0
        out_terms["neg_rewards"] = neg_rewards
    return total


def total_loss_closure(model: SRModel, batch, hyper: SRHyper,
                       rng: np.random.Generator | None):
    """(closure, params) pair for gradient checking the full training loss.

    The closure's stop-gradient targets are frozen from the model's current
    parameters, so central differences and the analytic gradient see the
    identical function.
    """
    data = _prepare_step(model, batch, hyper, rng)
    params = merged_params(model)
    return (lambda p: _loss_graph(model, p, data)), params


def compute_losses(model: SRModel, batch, hyper: SRHyper,
                   rng: np.random.Generator | None) -> tuple[LossBreakdown, NegativeBatch | None]:
    """Loss components on a batch plus the cached negative samples."""
    data = _prepare_step(model, batch, hyper, rng)
    terms: dict = {}
    _loss_graph(model, merged_params(model), data, out_terms=terms)
    breakdown = LossBreakdown(bellman=terms["bellman"], prediction=terms["prediction"],
                              magnitude=terms["magnitude"], neg_sample=terms["neg_sample"])
    cache = None
    if data.neg_s is not None:
        cache = NegativeBatch(s=data.neg_s, a=data.neg_a, rewards=terms["neg_rewards"])
    return breakdown, cache


def train_step(model: SRModel, opt: AdamState, batch, hyper: SRHyper,
               rng: np.random.Generator | None
               ) -> tuple[SRModel, AdamState, LossBreakdown, NegativeBatch | None]:
    """One Adam step on the total loss plus a Polyak update of the target head."""
    data = _prepare_step(model, batch, hyper, rng)
    params = merged_params(model)
    terms: dict = {}
    try:
        _, grads = eval_with_grads(lambda p: _loss_graph(model, p, data, out_terms=terms), params)
    except ContractViolation as e:
        raise TrainingError(f"non-finite loss in train_step: {e}",
                            diagnostics=terms or None) from e
    breakdown = LossBreakdown(bellman=terms["bellman"], prediction=terms["prediction"],
                              magnitude=terms["magnitude"], neg_sample=terms["neg_sample"])
    if not breakdown.finite():
        raise TrainingError("non-finite loss in train_step", diagnostics=breakdown)
    new_params, new_opt = adam_step(params, grads, opt)
    enc, sr, pred = _split_params(new_params)
    new_model = replace(model, encoder=enc, sr_head=sr, predictor=pred,
                        target_sr_head=polyak_update(model.target_sr_head, sr,
                                                     hyper.target_update))
    cache = None
    if data.neg_s is not None:
        cache = NegativeBatch(s=data.neg_s, a=data.neg_a, rewards=terms["neg_rewards"])
    return new_model, new_opt, breakdown, cache


def new_optimizer(model: SRModel, hyper: SRHyper) -> AdamState:
    return AdamState.for_params(merged_params(model), lr=hyper.lr_sr)


def pretrain(model: SRModel, ds: DemoDataset, hyper: SRHyper, rng: np.random.Generator,
             opt: AdamState | None = None, on_step=None) -> tuple[SRModel, AdamState]:
    """Run hyper.pretrain_steps training steps before any agent sees rewards."""
    if hyper.pretrain_steps < 0:
        raise ConfigurationError("pretrain_steps must be >= 0")
    if opt is None:
        opt = new_optimizer(model, hyper)
    for step in range(hyper.pretrain_steps):
        idx = sample_indices(ds, hyper.batch_size, rng)
        model, opt, breakdown, _ = train_step(model, opt, ds.batch_arrays(idx), hyper, rng)
        if on_step is not None:
            on_step(step, breakdown)
    return model, opt


def fit_sr_head_bellman(model: SRModel, batches, hyper: SRHyper,
                        lr: float | None = None) -> SRModel:
    """TD-train the SR head alone on the Bellman term, encoder frozen.

    This is the oracle-validation mode: the magnitude and negative-sampling
    terms deliberately bias rewards toward [0, 1], so checking the TD
    mechanism against an exact SR fixed point requires running it in
    isolation. `batches` yields batch tuples/lists.
    """
    params = {f"sr.{k}": v for k, v in model.sr_head.items()}
    params = dict(sorted(params.items()))
    opt = AdamState.for_params(params, lr=lr if lr is not None else hyper.lr_sr)
    for batch in batches:
        s, a, s2, a2, term = _stack_batch(batch)
        phi_s = encode_array(model, s)
        phi_s2 = encode_array(model, s2)
        m_target = mlp_forward_array(model.sr_spec, model.target_sr_head,
                                     np.concatenate([phi_s2, a2], axis=-1))
        mask = (1.0 - term.astype(np.float64))[:, None]
        target = np.concatenate([phi_s, a], axis=-1) + hyper.gamma * mask * m_target
        phisa = np.concatenate([phi_s, a], axis=-1)

        def loss(p):
            m = mlp_forward(model.sr_spec, p, phisa, prefix="sr.")
            return mean_(row_sumsq(m - Tensor(target)))

        _, grads = eval_with_grads(loss, params)
        params, opt = adam_step(params, grads, opt)
        sr = {k[3:]: v for k, v in params.items()}
        model = replace(model, sr_head=sr,
                        target_sr_head=polyak_update(model.target_sr_head, sr,
                                                     hyper.target_update))
    return model


# -- checkpoints ------------------------------------------------------------

def _spec_to_doc(spec: MLPSpec) -> dict:
    return {"layer_widths": list(spec.layer_widths),
            "hidden_activation": spec.hidden_activation,
            "output_activation": spec.output_activation}


def _spec_from_doc(doc: dict) -> MLPSpec:
    return MLPSpec(tuple(doc["layer_widths"]), doc["hidden_activation"], doc["output_activation"])


def sr_model_to_doc(model: SRModel, hyper: SRHyper) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "sr_model",
        "dims": {"d_s": model.d_s, "d_a": model.d_a, "d_phi": model.d_phi},
        "specs": {
            "encoder": _spec_to_doc(model.encoder_spec),
            "sr_head": _spec_to_doc(model.sr_spec),
            "predictor": _spec_to_doc(model.predictor_spec),
        },
        "params": {
            "encoder": nnkit.params_to_doc(model.encoder),
            "sr_head": nnkit.params_to_doc(model.sr_head),
            "predictor": nnkit.params_to_doc(model.predictor),
            "target_sr_head": nnkit.params_to_doc(model.target_sr_head),
        },
        "hyper": asdict(hyper),
    }


def sr_model_from_doc(doc: dict) -> tuple[SRModel, SRHyper]:
    if doc.get("kind") != "sr_model":
        raise ValidationError(f"not an SR model checkpoint: kind={doc.get('kind')}")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('format_version')}")
    dims = doc["dims"]
    model = SRModel(
        d_s=dims["d_s"], d_a=dims["d_a"], d_phi=dims["d_phi"],
        encoder_spec=_spec_from_doc(doc["specs"]["encoder"]),
        encoder=nnkit.params_from_doc(doc["params"]["encoder"]),
        sr_spec=_spec_from_doc(doc["specs"]["sr_head"]),
        sr_head=nnkit.params_from_doc(doc["params"]["sr_head"]),
        predictor_spec=_spec_from_doc(doc["specs"]["predictor"]),
        predictor=nnkit.params_from_doc(doc["params"]["predictor"]),
        target_sr_head=nnkit.params_from_doc(doc["params"]["target_sr_head"], requires_grad=False),
    )
    return model, SRHyper(**doc["hyper"])


def save_sr_model(model: SRModel, hyper: SRHyper, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sr_model_to_doc(model, hyper)))


def load_sr_model(path) -> tuple[SRModel, SRHyper]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    return sr_model_from_doc(json.loads(path.read_text()))
