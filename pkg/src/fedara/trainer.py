"""Local learner: a two-block MLP over frozen linear sites plus adapters.

Layout (columns are samples)::

    h0 = x
    h1 = act(site0(h0))   block0.proj
    h2 = act(site1(h1))   block0.ffn
    h3 = act(site2(h2))   block1.proj
    h4 = act(site3(h3))   block1.ffn
    logits = W_head h4 + b_head

Gradients are computed by hand; ``tests/test_trainer.py`` checks them
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import (
    AdapterConfig,
    Flavor,
    SvdAdapter,
    clone,
    live_rank,
    new_adapter,
)
from .data import Dataset
from .numerics import ContractError, Rng

SITE_NAMES = ("block0.proj", "block0.ffn", "block1.proj", "block1.ffn")
NUM_SITES = len(SITE_NAMES)


@dataclass
class TinyModel:
    sites: list
    head_w: np.ndarray
    head_b: np.ndarray
    activation: str = "tanh"
    # sites skipped entirely during local training (module pruning)
    frozen: set = field(default_factory=set)

    @property
    def dim(self) -> int:
        return self.head_w.shape[1]

    @property
    def classes(self) -> int:
        return self.head_w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, site in enumerate(self.sites):
            for name, arr in site.trainables().items():
                out[f"site{i}.{name}"] = arr
        out["head.W"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def clone(self) -> TinyModel:
        return TinyModel(
            sites=[clone(s) for s in self.sites],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            activation=self.activation,
            frozen=set(self.frozen),
        )


def init_bases(rng: Rng, d: int, num_sites: int = NUM_SITES) -> list[np.ndarray]:
    bases = []
    for i in range(num_sites):
        w = rng.fork(f"base{i}").normal((d, d), 1.0 / np.sqrt(d))
        w.flags.writeable = False
        bases.append(w)
    return bases


def build_model(rng: Rng, bases, classes: int, config: AdapterConfig, activation: str = "tanh") -> TinyModel:
    sites = [new_adapter(rng.fork(f"site{i}"), b, config) for i, b in enumerate(bases)]
    d = bases[-1].shape[0]
    return TinyModel(sites, np.zeros((classes, d)), np.zeros(classes), activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ContractError(f"unknown activation {kind!r}")


def forward_loss(model: TinyModel, batch: Dataset):
    """Mean softmax cross-entropy; returns ``(loss, cache)``."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    h = batch.features.T
    cache = {"inputs": [], "inner": [], "outputs": []}
    for i, site in enumerate(model.sites):
        cache["inputs"].append(h)
        z = site.base @ h
        u = None
        if i not in model.frozen:
            u = site.A @ h
            v = site.E[:, None] * u if site.has_e else u
            z = z + site.config.scale * (site.B @ v)
        cache["inner"].append(u)
        h = _act(z, model.activation)
        cache["outputs"].append(h)
    logits = model.head_w @ h + model.head_b[:, None]
    logits = logits - logits.max(axis=0, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=0, keepdims=True))
    n = len(batch)
    loss = -float(logp[batch.labels, np.arange(n)].mean())
    cache["probs"] = np.exp(logp)
    cache["labels"] = batch.labels
    return loss, cache


def backward(model: TinyModel, cache, include_base: bool = False) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean loss for every trainable array.

    Dead triplet slots get exactly zero gradient. Frozen sites get no entry.
    """
    probs, labels = cache["probs"], cache["labels"]
    n = labels.size
    g = probs.copy()
    g[labels, np.arange(n)] -= 1.0
    g /= n
    h_top = cache["outputs"][-1]
    grads = {"head.W": g @ h_top.T, "head.b": g.sum(axis=1)}
    gh = model.head_w.T @ g

    for i in reversed(range(len(model.sites))):
        site = model.sites[i]
        out = cache["outputs"][i]
        x = cache["inputs"][i]
        gz = gh * (1.0 - out * out) if model.activation == "tanh" else gh
        if include_base:
            grads[f"site{i}.base"] = gz @ x.T
        gx = site.base.T @ gz
        if i not in model.frozen:
            s = site.config.scale
            u = cache["inner"][i]
            alive = site.alive
            gv = s * (site.B.T @ gz)
            if site.has_e:
                v = site.E[:, None] * u
                grads[f"site{i}.E"] = np.where(alive, (gv * u).sum(axis=1), 0.0)
                gu = site.E[:, None] * gv
            else:
                v = u
                gu = gv
            grads[f"site{i}.B"] = s * (gz @ v.T) * alive
            grads[f"site{i}.A"] = (gu @ x.T) * alive[:, None]
            gx = gx + site.A.T @ gu
        gh = gx
    return grads


@dataclass
class OptState:
    """Adam moments keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: OptState, params: dict, grads: dict, lr_t: float | None = None) -> None:
    """One bias-corrected Adam update, in place. Params without a gradient are left alone."""
    lr = opt.lr if lr_t is None else lr_t
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def local_train(
    model: TinyModel,
    opt: OptState,
    shard: Dataset,
    rng: Rng,
    lr_t: float,
    epochs: int = 1,
    batch_size: int = 4,
    include_base: bool = False,
) -> float:
    """Sequential mini-batch Adam passes over ``shard``; returns mean batch loss."""
    if len(shard) == 0:
        raise ContractError("empty shard")
    params = model.params()
    if include_base:
        params.update({f"site{i}.base": s.base for i, s in enumerate(model.sites)})
    losses = []
    for epoch in range(epochs):
        order = rng.fork(f"epoch{epoch}").permutation(len(shard))
        for start in range(0, len(shard), batch_size):
            batch = shard.subset(order[start:start + batch_size])
            loss, cache = forward_loss(model, batch)
            adam_step(opt, params, backward(model, cache, include_base), lr_t)
            losses.append(loss)
    return float(np.mean(losses))


def evaluate(model: TinyModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    return float(np.mean(predict(model, dataset) == dataset.labels))


def predict(model: TinyModel, dataset: Dataset) -> np.ndarray:
    h = dataset.features.T
    for i, site in enumerate(model.sites):
        z = site.base @ h
        if i not in model.frozen:
            u = site.A @ h
            if site.has_e:
                u = site.E[:, None] * u
            z = z + site.config.scale * (site.B @ u)
        h = _act(z, model.activation)
    logits = model.head_w @ h + model.head_b[:, None]
    return np.argmax(logits, axis=0)


def pretrain_model(
    rng: Rng, dataset: Dataset, epochs: int, lr: float = 1e-2, batch_size: int = 16
) -> TinyModel:
    """Train bases and head centrally; adapters are rank-1 placeholders pinned at zero."""
    d = dataset.dim
    bases = [b.copy() for b in init_bases(rng.fork("init"), d)]
    placeholder = AdapterConfig(r_init=1, flavor=Flavor.TRUNC_SVD)
    sites = [
        SvdAdapter(base=b, B=np.zeros((d, 1)), E=np.zeros(1), A=np.zeros((1, d)), config=placeholder)
        for b in bases
    ]
    model = TinyModel(sites, rng.fork("head").normal((dataset.num_classes, d), 1.0 / np.sqrt(d)),
                      np.zeros(dataset.num_classes))
    # placeholders are held at zero by freezing them
    model.frozen = set(range(NUM_SITES))
    opt = OptState(lr=lr)
    for epoch in range(epochs):
        local_train(model, opt, dataset, rng.fork(f"pretrain{epoch}"), lr, 1, batch_size, include_base=True)
    model.frozen = set()
    return model


def pretrain_base(rng: Rng, dataset: Dataset, epochs: int) -> list[np.ndarray]:
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    bases = []
    for site in pretrain_model(rng, dataset, epochs).sites:
        w = site.base.copy()
        w.flags.writeable = False
        bases.append(w)
    return bases


def trainable_param_count(model: TinyModel, module_pruning: bool) -> int:
    """Parameters that receive updates in local training.

    Without module pruning every adapter matrix is trained whole. With it,
    frozen sites drop out and live sites count only their live triplets.
    """
    head = model.head_w.size + model.head_b.size
    total = 0
    for i, site in enumerate(model.sites):
        width = site.d_out + site.d_in + (1 if site.has_e else 0)
        if not module_pruning:
            total += site.config.r_init * width
        elif i not in model.frozen:
            total += live_rank(site) * width
    return total + head
