"""Multi-exit MLP encoder: a backbone of blocks plus sub-network exits.

An exit attached after block ``l`` reads the backbone activation ``T_l`` and
owns every parameter after that point (its suffix and its projection head);
blocks ``1..l`` are shared with the backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .optim import Parameter
from .tensor import Tensor

__all__ = [
    "BlockSpec",
    "ExitSpec",
    "Linear",
    "MultiExitEncoder",
    "ExitOutputs",
    "EncoderConfigError",
    "default_blocks",
    "build_encoder",
    "forward_all_exits",
    "STRUCTURES",
]

STRUCTURES = ("fc", "small", "same")


class EncoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    in_dim: int
    out_dim: int
    layers: tuple[int, ...]

    def __post_init__(self):
        if not self.layers:
            raise EncoderConfigError("a block needs at least one layer")
        if self.layers[-1] != self.out_dim:
            raise EncoderConfigError(f"last layer width {self.layers[-1]} != out_dim {self.out_dim}")
        if min(self.in_dim, *self.layers) < 1:
            raise EncoderConfigError("block widths must be positive")


@dataclass(frozen=True)
class ExitSpec:
    position: int
    structure: str = "small"
    head_dim: int = 128

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise EncoderConfigError(f"unknown exit structure {self.structure!r}")


def default_blocks(input_dim: int, widths: Sequence[int] = (256, 256, 128, 128),
                   layers_per_block: int = 2) -> list[BlockSpec]:
    blocks, prev = [], input_dim
    for w in widths:
        blocks.append(BlockSpec(prev, w, (w,) * layers_per_block))
        prev = w
    return blocks


INITS = ("he-normal", "glorot-uniform")


class Linear:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                 init: str = "he-normal"):
        # He-normal keeps the normalization-free ReLU stacks trainable at lr 0.05;
        # glorot-uniform collapses them to a single embedding at that rate.
        if init == "he-normal":
            w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        elif init == "glorot-uniform":
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
        else:
            raise ValueError(f"unknown init {init!r}; expected one of {INITS}")
        self.weight = Parameter.from_array(f"{name}.weight", w)
        self.bias = Parameter.from_array(f"{name}.bias", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight.tensor) + self.bias.tensor

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Stack:
    """Affine layers, each followed by ReLU unless ``final_relu`` is off for the last."""

    def __init__(self, layers: list[Linear], final_relu: bool = True):
        self.layers = layers
        self.final_relu = final_relu

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for n, layer in enumerate(self.layers):
            x = layer(x)
            if n < last or self.final_relu:
                x = T.relu(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class Head:
    """Projection head: affine -> ReLU -> affine -> row L2-normalize."""

    def __init__(self, name: str, in_dim: int, dim: int, rng: np.random.Generator,
                 init: str = "he-normal"):
        self.fc1 = Linear(f"{name}.layer0", in_dim, dim, rng, init)
        self.fc2 = Linear(f"{name}.layer1", dim, dim, rng, init)

    def __call__(self, x: Tensor) -> Tensor:
        return T.l2_normalize(self.fc2(T.relu(self.fc1(x))))

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


@dataclass
class Exit:
    spec: ExitSpec
    suffix: list[Stack]
    head: Head

    def parameters(self, include_head: bool = True) -> list[Parameter]:
        ps = [p for s in self.suffix for p in s.parameters()]
        return ps + (self.head.parameters() if include_head else [])

    @property
    def depth(self) -> int:
        return sum(len(s.layers) for s in self.suffix)


@dataclass
class ExitOutputs:
    """Per-exit embeddings ordered ``[exit_1 .. exit_{L-1}, backbone]``.

    ``targets`` is the list used as contrast targets for sub-network anchors:
    identical to ``embeddings`` unless the backbone was stop-gradded.
    """

    embeddings: list[Tensor]
    features: list[Tensor]
    block_activations: list[Tensor]
    targets: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.targets:
            self.targets = list(self.embeddings)

    @property
    def n_exits(self) -> int:
        return len(self.embeddings)

    @property
    def backbone(self) -> Tensor:
        return self.embeddings[-1]

    @property
    def rows(self) -> int:
        return self.embeddings[0].shape[0]

    def candidates_for(self, anchor_exit: int) -> list[Tensor]:
        """Embeddings an anchor from ``anchor_exit`` contrasts against."""
        if anchor_exit == self.n_exits - 1:
            return self.embeddings
        return self.targets


class MultiExitEncoder:
    def __init__(self, blocks: Sequence[BlockSpec], exits: Sequence[ExitSpec],
                 head_dim: int = 128, init_seed: int = 0, init: str = "he-normal"):
        blocks = list(blocks)
        if not blocks:
            raise EncoderConfigError("encoder needs at least one block")
        for a, b in zip(blocks, blocks[1:]):
            if a.out_dim != b.in_dim:
                raise EncoderConfigError(f"block dims incompatible: {a.out_dim} -> {b.in_dim}")
        L = len(blocks)
        positions = [e.position for e in exits]
        if len(set(positions)) != len(positions):
            raise EncoderConfigError(f"duplicate exit positions {positions}")
        for p in positions:
            if not 1 <= p < L:
                raise EncoderConfigError(f"exit position {p} outside [1, {L - 1}]")

        self.block_specs = blocks
        self.head_dim = head_dim
        self.init_seed = init_seed
        self.init = init
        rng = np.random.default_rng(init_seed)

        self.blocks: list[Stack] = []
        for b, spec in enumerate(blocks, start=1):
            layers, prev = [], spec.in_dim
            for j, w in enumerate(spec.layers):
                layers.append(Linear(f"backbone.block{b}.layer{j}", prev, w, rng, init))
                prev = w
            self.blocks.append(Stack(layers))
        self.head = Head("backbone.head", blocks[-1].out_dim, head_dim, rng, init)

        self.exits: list[Exit] = []
        for n, spec in enumerate(sorted(exits, key=lambda e: e.position)):
            self.exits.append(self._build_exit(n, spec, rng))

    def _build_exit(self, n: int, spec: ExitSpec, rng: np.random.Generator) -> Exit:
        name = f"exit{n}"
        rest = self.block_specs[spec.position:]
        start = self.block_specs[spec.position - 1].out_dim
        suffix: list[Stack] = []
        if spec.structure == "fc":
            suffix.append(Stack([Linear(f"{name}.suffix.fc", start, rest[-1].out_dim, rng, self.init)],
                                final_relu=False))
        else:
            same_depth = sum(len(b.layers) for b in rest)
            prev = start
            for b, block in enumerate(rest, start=spec.position + 1):
                widths = block.layers
                if spec.structure == "small":
                    widths = widths[-math.ceil(len(widths) / 2):]
                layers = []
                for j, w in enumerate(widths):
                    layers.append(Linear(f"{name}.suffix.block{b}.layer{j}", prev, w, rng, self.init))
                    prev = w
                suffix.append(Stack(layers))
            if spec.structure == "small" and sum(len(s.layers) for s in suffix) >= same_depth:
                raise EncoderConfigError(
                    f"exit at block {spec.position}: 'small' is not shallower than 'same' "
                    "for single-layer blocks")
        head = Head(f"{name}.head", rest[-1].out_dim, spec.head_dim, rng, self.init)
        return Exit(spec, suffix, head)

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def input_dim(self) -> int:
        return self.block_specs[0].in_dim

    def backbone_parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters()] + self.head.parameters()

    def exit_parameters(self) -> list[Parameter]:
        return [p for e in self.exits for p in e.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.backbone_parameters() + self.exit_parameters()

    def backbone_suffix_parameters(self, position: int) -> list[Parameter]:
        """Backbone parameters after block ``position`` (including its head)."""
        return [p for b in self.blocks[position:] for p in b.parameters()] + self.head.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, stop_grad_backbone_targets: bool = False) -> ExitOutputs:
        return forward_all_exits(self, x, stop_grad_backbone_targets)

    __call__ = forward


def build_encoder(blocks: Sequence[BlockSpec], exits: Iterable[ExitSpec] = (),
                  head_dim: int = 128, init_seed: int = 0, init: str = "he-normal") -> MultiExitEncoder:
    exits = [e if e.head_dim == head_dim else ExitSpec(e.position, e.structure, head_dim) for e in exits]
    return MultiExitEncoder(blocks, exits, head_dim, init_seed, init)


def forward_all_exits(enc: MultiExitEncoder, batch, stop_grad_backbone_targets: bool = False) -> ExitOutputs:
    """Run the shared prefix once and every exit from its branch point."""
    x = batch if isinstance(batch, Tensor) else Tensor(getattr(batch, "features", batch))
    if x.ndim != 2 or x.shape[1] != enc.input_dim:
        raise T.ShapeError(f"batch shape {x.shape} does not match encoder input dim {enc.input_dim}")
    acts = []
    h = x
    for block in enc.blocks:
        h = block(h)
        acts.append(h)
    feats, embs = [], []
    for ex in enc.exits:
        f = acts[ex.spec.position - 1]
        for stack in ex.suffix:
            f = stack(f)
        feats.append(f)
        embs.append(ex.head(f))
    feats.append(acts[-1])
    embs.append(enc.head(acts[-1]))
    targets = list(embs)
    if stop_grad_backbone_targets:
        targets[-1] = embs[-1].detach()
    return ExitOutputs(embs, feats, acts, targets)
