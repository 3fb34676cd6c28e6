"""Network definitions and role-tagged parameter sets.

The practical backbone is an MLP with a BatchNorm layer after every hidden
linear layer. Each parameter block carries a role pair: a normalization role
(``bn`` or ``shared``) that drives the personalization split, and a layer
role (``extractor`` or ``classifier``) that drives classifier transfer. BN
running statistics live in the ParamSet as non-trainable ``bn`` blocks so
they travel with the personalized split.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .numerics import Tape, Tensor, add, batch_norm, matmul, relu

Role = tuple[str, str]  # (bn|shared, extractor|classifier)

_KINDS = ("bn", "shared")
_PARTS = ("extractor", "classifier")


@dataclass
class ParamSet:
    """Named parameter blocks with role tags and a frozen-name set."""

    blocks: dict[str, Tensor] = field(default_factory=dict)
    roles: dict[str, Role] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)

    def add_block(self, name: str, tensor: Tensor, role: Role) -> None:
        if name in self.blocks:
            raise ValueError(f"duplicate block name {name!r}")
        if role[0] not in _KINDS or role[1] not in _PARTS:
            raise ValueError(f"invalid role {role!r} for block {name!r}")
        self.blocks[name] = tensor
        self.roles[name] = role

    def names(self) -> list[str]:
        return list(self.blocks)

    def clone(self) -> "ParamSet":
        out = ParamSet(roles=dict(self.roles), frozen=set(self.frozen))
        out.blocks = {name: t.copy() for name, t in self.blocks.items()}
        return out

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.blocks.items():
            if t.requires_grad and name not in self.frozen:
                yield name, t

    def take_grads(self) -> dict[str, np.ndarray]:
        """Collect and clear accumulated gradients, keyed by block name."""
        grads: dict[str, np.ndarray] = {}
        for name, t in self.blocks.items():
            if t.grad is not None:
                grads[name] = t.grad
                t.grad = None
        return grads

    def __len__(self) -> int:
        return len(self.blocks)


def params_equal(a: ParamSet, b: ParamSet, check_meta: bool = True) -> bool:
    """Exact (bitwise) equality of two parameter sets."""
    if set(a.blocks) != set(b.blocks):
        return False
    if check_meta and (a.roles != b.roles or a.frozen != b.frozen):
        return False
    return all(np.array_equal(a.blocks[n].data, b.blocks[n].data) for n in a.blocks)


@dataclass
class MLPConfig:
    input_dim: int
    hidden_widths: list[int]
    num_classes: int
    bn_after_hidden: bool = True

    def validate(self) -> None:
        if not self.hidden_widths:
            raise ValueError("need at least one hidden layer")
        if any(w < 1 for w in self.hidden_widths) or self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("all dimensions must be >= 1")


@dataclass
class ModelOutput:
    logits: Tensor
    features: Tensor


def init_mlp(cfg: MLPConfig, seed: int) -> ParamSet:
    """He-initialized MLP parameters with role tags.

    Weights ~ N(0, 2/fan_in), biases 0, BN gamma=1 beta=0, running stats
    (0, 1). The final linear layer is tagged ``classifier``; everything else
    is ``extractor``; BN blocks (including running stats) are tagged ``bn``.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ParamSet()
    fan_in = cfg.input_dim
    for layer, width in enumerate(cfg.hidden_widths):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
        params.add_block(f"layer{layer}.weight", Tensor(w, requires_grad=True),
                         ("shared", "extractor"))
        params.add_block(f"layer{layer}.bias", Tensor(np.zeros(width), requires_grad=True),
                         ("shared", "extractor"))
        if cfg.bn_after_hidden:
            params.add_block(f"bn{layer}.gamma", Tensor(np.ones(width), requires_grad=True),
                             ("bn", "extractor"))
            params.add_block(f"bn{layer}.beta", Tensor(np.zeros(width), requires_grad=True),
                             ("bn", "extractor"))
            params.add_block(f"bn{layer}.running_mean", Tensor(np.zeros(width)),
                             ("bn", "extractor"))
            params.add_block(f"bn{layer}.running_var", Tensor(np.ones(width)),
                             ("bn", "extractor"))
        fan_in = width
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cfg.num_classes))
    params.add_block("head.weight", Tensor(w, requires_grad=True), ("shared", "classifier"))
    params.add_block("head.bias", Tensor(np.zeros(cfg.num_classes), requires_grad=True),
                     ("shared", "classifier"))
    return params


def forward(params: ParamSet, cfg: MLPConfig, x: Tensor, mode: str = "train",
            tape: Tape | None = None) -> ModelOutput:
    """Run linear -> BN -> ReLU per hidden layer, then the classifier head.

    ``features`` is the last hidden activation; ``logits`` is the head output
    computed from it in the same pass.
    """
    if x.data.ndim != 2 or x.data.shape[1] != cfg.input_dim:
        raise ValueError(f"input shape {x.data.shape} does not match input_dim {cfg.input_dim}")
    h = x
    for layer in range(len(cfg.hidden_widths)):
        h = add(matmul(h, params.blocks[f"layer{layer}.weight"], tape),
                params.blocks[f"layer{layer}.bias"], tape)
        if cfg.bn_after_hidden:
            h = batch_norm(h, params.blocks[f"bn{layer}.gamma"],
                           params.blocks[f"bn{layer}.beta"],
                           params.blocks[f"bn{layer}.running_mean"],
                           params.blocks[f"bn{layer}.running_var"],
                           mode=mode, tape=tape)
        h = relu(h, tape)
    logits = apply_classifier(params, h, tape)
    return ModelOutput(logits=logits, features=h)


def apply_classifier(params: ParamSet, features: Tensor,
                     tape: Tape | None = None) -> Tensor:
    """Apply the classifier-role linear head of ``params`` to features."""
    return add(matmul(features, params.blocks["head.weight"], tape),
               params.blocks["head.bias"], tape)


Selector = Callable[[str, Role], bool]

_SELECTORS: dict[str, Selector] = {
    "bn": lambda _n, role: role[0] == "bn",
    "shared": lambda _n, role: role[0] == "shared",
    "extractor": lambda _n, role: role[1] == "extractor",
    "classifier": lambda _n, role: role[1] == "classifier",
}


def split_params(params: ParamSet, predicate: str | Selector) -> tuple[ParamSet, ParamSet]:
    """Partition blocks by role predicate into (selected, rest).

    Both halves share the underlying tensors and retain names, roles and
    frozen marks; split followed by merge reconstructs the original set.
    """
    if isinstance(predicate, str):
        try:
            predicate = _SELECTORS[predicate]
        except KeyError:
            raise ValueError(f"unknown role selector {predicate!r}") from None
    selected, rest = ParamSet(), ParamSet()
    for name, tensor in params.blocks.items():
        target = selected if predicate(name, params.roles[name]) else rest
        target.add_block(name, tensor, params.roles[name])
        if name in params.frozen:
            target.frozen.add(name)
    return selected, rest


def merge_params(a: ParamSet, b: ParamSet) -> ParamSet:
    """Union of two disjoint parameter sets, order-normalized by name."""
    overlap = set(a.blocks) & set(b.blocks)
    if overlap:
        raise ValueError(f"duplicate block names in merge: {sorted(overlap)}")
    merged = ParamSet()
    entries = [(name, src) for src in (a, b) for name in src.blocks]
    for name, src in sorted(entries):
        merged.add_block(name, src.blocks[name], src.roles[name])
        if name in src.frozen:
            merged.frozen.add(name)
    return merged


def clone_frozen(params: ParamSet) -> ParamSet:
    """Deep copy with every block frozen and detached from gradients."""
    out = ParamSet(roles=dict(params.roles))
    out.blocks = {name: t.copy(requires_grad=False) for name, t in params.blocks.items()}
    out.frozen = set(out.blocks)
    return out


def predict_class(logits: Tensor) -> np.ndarray:
    """Argmax per row; ties break toward the smallest index."""
    if logits.data.ndim != 2 or logits.data.shape[1] < 1:
        raise ValueError(f"expected B x C logits, got {logits.data.shape}")
    return logits.data.argmax(axis=1)
