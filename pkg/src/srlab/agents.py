"""Offline consumers of the learned reward.

Two agents share the plumbing here: a behavioral-cloning baseline (mean
squared action error) and an expectile-regression offline RL agent in the
IQL family: V is trained by expectile regression toward a stop-gradient
target Q, Q is trained toward r + gamma * V(s'), and the deterministic policy
head is extracted by advantage-weighted regression onto dataset actions.

Rewards come either from a reward model (use_sr_reward) or from a dataset
reward column. When negative samples are supplied, the batch is doubled:
perturbed rows keep their model-estimated rewards, duplicate s', and are
forced terminal so they contribute reward signal without bootstrapping.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import nnkit
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
    mean_,
    mlp_forward,
    mlp_forward_array,
    mul,
    polyak_update,
    row_sumsq,
)
from .srreward import NegativeBatch, SRModel, reward

Array = np.ndarray

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPHead:
    spec: MLPSpec
    params: ParamSet

    def forward(self, x: Array) -> Array:
        return mlp_forward_array(self.spec, self.params, x)


@dataclass(frozen=True)
class BCPolicy:
    net: MLPHead


@dataclass(frozen=True)
class AgentBundle:
    qnet: MLPHead
    vnet: MLPHead
    policy: MLPHead
    target_q: ParamSet


@dataclass
class AgentHyper:
    gamma: float = 0.99
    expectile: float = 0.7
    awr_temperature: float = 3.0
    awr_max_weight: float = 100.0
    lr_q: float = 3e-4
    lr_v: float = 3e-4
    lr_pi: float = 1e-4
    polyak: float = 0.005
    use_sr_reward: bool = True
    augment_with_negatives: bool = True
    explore_std: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must be in (0, 1]")
        if not 0.5 <= self.expectile < 1.0:
            raise ConfigurationError("expectile must be in [0.5, 1)")
        if self.awr_temperature <= 0 or self.awr_max_weight <= 0:
            raise ConfigurationError("AWR temperature and max weight must be positive")


def expectile_loss_values(u: Array, tau: float) -> Array:
    """L_tau(u) = |tau - 1(u < 0)| * u^2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0.0, 1.0 - tau, tau)
    return weight * u * u


def awr_weights(advantage: Array, hyper: AgentHyper) -> Array:
    """exp(A / temperature), clipped at awr_max_weight; finite and positive."""
    exponent = np.minimum(advantage / hyper.awr_temperature, np.log(hyper.awr_max_weight))
    return np.exp(exponent)


def init_bc_policy(d_s: int, d_a: int, rng: np.random.Generator,
                   hidden=(128, 128)) -> BCPolicy:
    spec = MLPSpec((d_s, *hidden, d_a))
    return BCPolicy(net=MLPHead(spec, init_mlp_params(spec, rng)))


def init_agent_bundle(d_s: int, d_a: int, rng: np.random.Generator,
                      q_hidden=(256, 256), v_hidden=(128, 128),
                      pi_hidden=(128, 128)) -> AgentBundle:
    q_spec = MLPSpec((d_s + d_a, *q_hidden, 1))
    v_spec = MLPSpec((d_s, *v_hidden, 1))
    pi_spec = MLPSpec((d_s, *pi_hidden, d_a))
    q_params = init_mlp_params(q_spec, rng)
    return AgentBundle(
        qnet=MLPHead(q_spec, q_params),
        vnet=MLPHead(v_spec, init_mlp_params(v_spec, rng)),
        policy=MLPHead(pi_spec, init_mlp_params(pi_spec, rng)),
        target_q=clone_params(q_params),
    )


def new_agent_optimizers(bundle: AgentBundle, hyper: AgentHyper) -> dict:
    return {
        "q": AdamState.for_params(bundle.qnet.params, lr=hyper.lr_q),
        "v": AdamState.for_params(bundle.vnet.params, lr=hyper.lr_v),
        "pi": AdamState.for_params(bundle.policy.params, lr=hyper.lr_pi),
    }


def act(policy, s: Array, deterministic: bool = True,
        rng: np.random.Generator | None = None, explore_std: float = 0.1) -> Array:
    """Policy head output; stochastic mode adds Gaussian exploration noise."""
    head = policy.net if isinstance(policy, BCPolicy) else policy
    a = head.forward(np.asarray(s, dtype=np.float64))
    if not deterministic:
        if rng is None:
            raise ConfigurationError("stochastic act needs an rng")
        a = a + rng.normal(0.0, explore_std, size=a.shape)
    return a


def _one_step(params: ParamSet, opt: AdamState, loss_fn) -> tuple[ParamSet, AdamState, float]:
    value, grads = eval_with_grads(loss_fn, params)
    new_params, new_opt = adam_step(params, grads, opt)
    return new_params, new_opt, value


def bc_train_step(policy: BCPolicy, batch, opt: AdamState,
                  rng: np.random.Generator | None = None) -> tuple[BCPolicy, AdamState, float]:
    """One Adam step on mean squared action error."""
    s, a = _policy_batch(batch)

    def loss(p):
        out = mlp_forward(policy.net.spec, p, s)
        return mean_(row_sumsq(out - Tensor(a)))

    try:
        params, new_opt, value = _one_step(policy.net.params, opt, loss)
    except ContractViolation as e:
        raise TrainingError(f"non-finite BC loss: {e}") from e
    return BCPolicy(net=MLPHead(policy.net.spec, params)), new_opt, value


def _policy_batch(batch) -> tuple[Array, Array]:
    if isinstance(batch, tuple):
        return np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1], dtype=np.float64)
    return np.stack([t.s for t in batch]), np.stack([t.a for t in batch])


def _rl_batch(batch) -> tuple[Array, Array, Array, Array]:
    if isinstance(batch, tuple):
        s, a, s2 = batch[0], batch[1], batch[2]
        term = batch[4] if len(batch) > 4 else batch[3]
        return (np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64),
                np.asarray(s2, dtype=np.float64), np.asarray(term, dtype=np.float64))
    return (np.stack([t.s for t in batch]), np.stack([t.a for t in batch]),
            np.stack([t.s_next for t in batch]),
            np.asarray([t.terminal for t in batch], dtype=np.float64))


@dataclass(frozen=True)
class RLStepReport:
    v_loss: float
    q_loss: float
    policy_loss: float
    reward_mean: float
    batch_size: int


def rl_train_step(bundle: AgentBundle, batch, sr_model: SRModel | None,
                  hyper: AgentHyper, opts: dict, rng: np.random.Generator | None = None,
                  negatives: NegativeBatch | None = None,
                  rewards: Array | None = None) -> tuple[AgentBundle, dict, RLStepReport]:
    """One expectile-regression agent update on a (possibly augmented) batch."""
    s, a, s2, term = _rl_batch(batch)
    if hyper.use_sr_reward:
        if sr_model is None:
            raise ConfigurationError("use_sr_reward requires a reward model")
        r = np.asarray(reward(sr_model, s, a), dtype=np.float64)
    else:
        if rewards is None:
            raise ConfigurationError("use_sr_reward=false requires a dataset reward column")
        r = np.asarray(rewards, dtype=np.float64)
        if r.shape != (len(s),):
            raise ConfigurationError("reward column shape mismatch")

    if hyper.augment_with_negatives and negatives is not None:
        s = np.concatenate([s, negatives.s])
        a = np.concatenate([a, negatives.a])
        s2 = np.concatenate([s2, s2])  # duplicated next states
        r = np.concatenate([r, negatives.rewards])
        term = np.concatenate([term, np.ones(len(negatives.s))])  # never bootstrap

    # V: expectile regression toward stop-gradient target Q
    q_t = mlp_forward_array(bundle.qnet.spec, bundle.target_q,
                            np.concatenate([s, a], axis=1))[:, 0]
    v_now = bundle.vnet.forward(s)[:, 0]
    u = q_t - v_now
    w_exp = np.where(u < 0.0, 1.0 - hyper.expectile, hyper.expectile)

    def v_loss_fn(p):
        v = mlp_forward(bundle.vnet.spec, p, s)
        diff = Tensor(q_t[:, None]) - v
        return mean_(mul(Tensor(w_exp[:, None]), mul(diff, diff)))

    v_params, opts["v"], v_loss = _one_step(bundle.vnet.params, opts["v"], v_loss_fn)
    vnet = MLPHead(bundle.vnet.spec, v_params)

    # Q: TD toward r + gamma * (1 - terminal) * V(s')
    v_next = mlp_forward_array(vnet.spec, v_params, s2)[:, 0]
    y = r + hyper.gamma * (1.0 - term) * v_next
    sa = np.concatenate([s, a], axis=1)

    def q_loss_fn(p):
        q = mlp_forward(bundle.qnet.spec, p, sa)
        diff = q - Tensor(y[:, None])
        return mean_(mul(diff, diff))

    q_params, opts["q"], q_loss = _one_step(bundle.qnet.params, opts["q"], q_loss_fn)

    # policy: advantage-weighted regression onto the batch actions
    v_for_adv = mlp_forward_array(vnet.spec, v_params, s)[:, 0]
    advantage = q_t - v_for_adv
    w = awr_weights(advantage, hyper)

    def pi_loss_fn(p):
        out = mlp_forward(bundle.policy.spec, p, s)
        per = row_sumsq(out - Tensor(a))
        return mean_(mul(Tensor(w), per))

    pi_params, opts["pi"], pi_loss = _one_step(bundle.policy.params, opts["pi"], pi_loss_fn)

    new_bundle = AgentBundle(
        qnet=MLPHead(bundle.qnet.spec, q_params),
        vnet=vnet,
        policy=MLPHead(bundle.policy.spec, pi_params),
        target_q=polyak_update(bundle.target_q, q_params, hyper.polyak),
    )
    report = RLStepReport(v_loss=v_loss, q_loss=q_loss, policy_loss=pi_loss,
                          reward_mean=float(r.mean()), batch_size=len(s))
    return new_bundle, opts, report


# -- checkpoints ------------------------------------------------------------

def _head_to_doc(head: MLPHead) -> dict:
    return {
        "spec": {"layer_widths": list(head.spec.layer_widths),
                 "hidden_activation": head.spec.hidden_activation,
                 "output_activation": head.spec.output_activation},
        "params": nnkit.params_to_doc(head.params),
    }


def _head_from_doc(doc: dict) -> MLPHead:
    spec = MLPSpec(tuple(doc["spec"]["layer_widths"]), doc["spec"]["hidden_activation"],
                   doc["spec"]["output_activation"])
    return MLPHead(spec, nnkit.params_from_doc(doc["params"]))


def agent_to_doc(bundle: AgentBundle, hyper: AgentHyper) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "agent_bundle",
        "qnet": _head_to_doc(bundle.qnet),
        "vnet": _head_to_doc(bundle.vnet),
        "policy": _head_to_doc(bundle.policy),
        "target_q": nnkit.params_to_doc(bundle.target_q),
        "hyper": asdict(hyper),
    }


def agent_from_doc(doc: dict) -> tuple[AgentBundle, AgentHyper]:
    if doc.get("kind") != "agent_bundle":
        raise ValidationError(f"not an agent checkpoint: kind={doc.get('kind')}")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('format_version')}")
    bundle = AgentBundle(
        qnet=_head_from_doc(doc["qnet"]),
        vnet=_head_from_doc(doc["vnet"]),
        policy=_head_from_doc(doc["policy"]),
        target_q=nnkit.params_from_doc(doc["target_q"], requires_grad=False),
    )
    return bundle, AgentHyper(**doc["hyper"])


def bc_to_doc(policy: BCPolicy) -> dict:
    return {"format_version": CHECKPOINT_VERSION, "kind": "bc_policy",
            "net": _head_to_doc(policy.net)}


def bc_from_doc(doc: dict) -> BCPolicy:
    if doc.get("kind") != "bc_policy":
        raise ValidationError(f"not a BC checkpoint: kind={doc.get('kind')}")
    return BCPolicy(net=_head_from_doc(doc["net"]))


def save_agent(bundle: AgentBundle, hyper: AgentHyper, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(agent_to_doc(bundle, hyper)))


def load_agent(path) -> tuple[AgentBundle, AgentHyper]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    return agent_from_doc(json.loads(path.read_text()))


def save_bc(policy: BCPolicy, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(bc_to_doc(policy)))


def load_bc(path) -> BCPolicy:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    return bc_from_doc(json.loads(path.read_text()))
