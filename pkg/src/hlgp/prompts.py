"""Per-task prompt generators.

The grouped generator derives every layer's key/value prompt from one
task-specific root prompt: contiguous layer groups each own a bottleneck
adapter pair that projects the root's key and value halves into a shared
implicit prompt, and a per-layer position offset specializes it for each
layer in the group. The independent baseline trains a free key/value pair
per layer instead.

Sub-prompts are derived tensors: recomputed from the generator's
parameters on every call, never independently trainable.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import LayerPrompt
from .errors import ConfigError, ContractError, DimensionError
from .rand import rng_for
from .tensor import Tensor

PIE_MODES = ("shared", "non_shared", "sinusoidal", "none")
PROMPT_MODES = ("hlgp_pie", "hlgp", "independent_layerwise")


class GroupPartition:
    """Contiguous, disjoint layer groups of equal size covering [0, m)."""

    def __init__(self, num_layers: int, shared_layers: int, groups: list[range]):
        self.num_layers = num_layers
        self.shared_layers = shared_layers
        self.groups = groups

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def group_of(self, layer: int) -> int:
        return layer // self.shared_layers


def partition_layers(num_layers: int, shared_layers: int) -> GroupPartition:
    if num_layers < 1 or shared_layers < 1:
        raise ConfigError("layer and group sizes must be >= 1")
    if num_layers % shared_layers:
        raise ConfigError(
            f"shared_layers {shared_layers} does not divide "
            f"num_layers {num_layers}"
        )
    groups = [
        range(start, start + shared_layers)
        for start in range(0, num_layers, shared_layers)
    ]
    return GroupPartition(num_layers, shared_layers, groups)


class RootPrompt:
    """Task-specific prompt pair the whole hierarchy derives from."""

    def __init__(self, task_id: int, key: Tensor, value: Tensor):
        self.task_id = task_id
        self.key = key
        self.value = value


class GroupAdapter:
    """Bottleneck projection from the root prompt to one group's implicit
    prompt: up(gelu(down(x) + down_bias)) + up_bias, applied row-wise."""

    def __init__(self, group: int, pathway: str, down: Tensor, down_bias: Tensor,
                 up: Tensor, up_bias: Tensor):
        self.group = group
        self.pathway = pathway
        self.down = down
        self.down_bias = down_bias
        self.up = up
        self.up_bias = up_bias

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    @classmethod
    def fresh(cls, group: int, pathway: str, embed_dim: int, rank: int,
              rng: np.random.Generator, name: str) -> "GroupAdapter":
        if rank >= embed_dim:
            raise ConfigError(f"adapter rank {rank} must be < embed_dim {embed_dim}")
        bound = 1.0 / np.sqrt(embed_dim)
        # up starts at zero so the initial sub-prompts vanish and training
        # begins at the exact frozen-backbone function
        return cls(
            group, pathway,
            down=Tensor(rng.uniform(-bound, bound, size=(embed_dim, rank)),
                        trainable=True, name=name + ".down"),
            down_bias=Tensor(np.zeros(rank), trainable=True, name=name + ".down_bias"),
            up=Tensor(np.zeros((rank, embed_dim)), trainable=True, name=name + ".up"),
            up_bias=Tensor(np.zeros(embed_dim), trainable=True, name=name + ".up_bias"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.down, self.down_bias, self.up, self.up_bias]


def adapter_project(root_part: Tensor, adapter: GroupAdapter) -> Tensor:
    """Map an (L, D) root prompt half to the group's (L, D) implicit prompt."""
    if root_part.shape[-1] != adapter.down.shape[0]:
        raise DimensionError(
            f"root prompt dim {root_part.shape} does not match adapter "
            f"down {adapter.down.shape}"
        )
    hidden = T.gelu(T.add(T.matmul(root_part, adapter.down), adapter.down_bias))
    return T.add(T.matmul(hidden, adapter.up), adapter.up_bias)


def apply_pie(implicit: Tensor, beta: Tensor) -> Tensor:
    """Add a layer's position offset to a group implicit prompt."""
    if implicit.shape != beta.shape:
        raise DimensionError(
            f"offset shape {beta.shape} does not match prompt {implicit.shape}"
        )
    return T.add(implicit, beta)


def sinusoidal_offset(layer: int, prompt_len: int, embed_dim: int) -> np.ndarray:
    """Classic interleaved sin/cos encoding of the layer index, broadcast
    over the (L, D) prompt."""
    half = np.arange(0, embed_dim, 2, dtype=np.float64)
    div = np.exp(-np.log(10000.0) * half / embed_dim)
    row = np.zeros(embed_dim)
    row[0::2] = np.sin(layer * div)
    row[1::2] = np.cos(layer * div[: row[1::2].shape[0]])
    return np.tile(row, (prompt_len, 1))


class PIETable:
    """Per-layer prompt offsets; one table (shared mode) adds the same
    offset to both the key and value pathways of its layer."""

    def __init__(self, task_id: int, mode: str,
                 key_tables: list[Tensor], value_tables: list[Tensor]):
        if mode not in PIE_MODES:
            raise ConfigError(f"unknown pie mode {mode!r}")
        self.task_id = task_id
        self.mode = mode
        self.key_tables = key_tables      # empty in mode "none"
        self.value_tables = value_tables  # aliases key_tables except non_shared

    @classmethod
    def fresh(cls, task_id: int, mode: str, num_layers: int, prompt_len: int,
              embed_dim: int) -> "PIETable":
        if mode == "none":
            return cls(task_id, mode, [], [])
        if mode == "sinusoidal":
            tables = [
                Tensor(sinusoidal_offset(i, prompt_len, embed_dim),
                       trainable=False, name=f"pie.{i}")
                for i in range(num_layers)
            ]
            return cls(task_id, mode, tables, tables)
        if mode == "shared":
            tables = [
                Tensor(np.zeros((prompt_len, embed_dim)), trainable=True,
                       name=f"pie.{i}")
                for i in range(num_layers)
            ]
            return cls(task_id, mode, tables, tables)
        keys = [
            Tensor(np.zeros((prompt_len, embed_dim)), trainable=True,
                   name=f"pie.key.{i}")
            for i in range(num_layers)
        ]
        values = [
            Tensor(np.zeros((prompt_len, embed_dim)), trainable=True,
                   name=f"pie.value.{i}")
            for i in range(num_layers)
        ]
        return cls(task_id, mode, keys, values)

    def entries(self) -> int:
        return len(self.key_tables)

    def tensors(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.key_tables}
        for t in self.value_tables:
            out[t.name] = t
        return out


class SubPromptSet:
    """Per-layer derived prompts plus the pre-offset group prompts they
    came from (kept for invariant checks)."""

    def __init__(self, layers: list[LayerPrompt],
                 group_key: list[Tensor], group_value: list[Tensor]):
        self.layers = layers
        self.group_key = group_key      # per layer: its group's implicit key prompt
        self.group_value = group_value


def generate_subprompts(root: RootPrompt, key_adapters: list[GroupAdapter],
                        value_adapters: list[GroupAdapter], pie: PIETable,
                        part: GroupPartition) -> SubPromptSet:
    """Derive every layer's key/value prompt from the task's parameters."""
    if len(key_adapters) != part.num_groups or len(value_adapters) != part.num_groups:
        raise ContractError(
            f"need one key and one value adapter per group "
            f"({part.num_groups}), got {len(key_adapters)}/{len(value_adapters)}"
        )
    if pie.mode != "none" and pie.entries() != part.num_layers:
        raise ContractError(
            f"offset table has {pie.entries()} entries for "
            f"{part.num_layers} layers"
        )
    layers: list[LayerPrompt] = []
    group_key: list[Tensor] = []
    group_value: list[Tensor] = []
    for g, layer_range in enumerate(part.groups):
        theta = adapter_project(root.key, key_adapters[g])
        chi = adapter_project(root.value, value_adapters[g])
        for i in layer_range:
            if pie.mode == "none":
                layers.append(LayerPrompt(theta, chi))
            else:
                layers.append(LayerPrompt(
                    apply_pie(theta, pie.key_tables[i]),
                    apply_pie(chi, pie.value_tables[i]),
                ))
            group_key.append(theta)
            group_value.append(chi)
    return SubPromptSet(layers, group_key, group_value)


# ---------------------------------------------------------------------------
# generators


class HlgpGenerator:
    """Grouped prompt generator for one task."""

    prompt_mode = "hlgp"

    def __init__(self, task_id: int, part: GroupPartition, root: RootPrompt,
                 key_adapters: list[GroupAdapter], value_adapters: list[GroupAdapter],
                 pie: PIETable):
        self.task_id = task_id
        self.part = part
        self.root = root
        self.key_adapters = key_adapters
        self.value_adapters = value_adapters
        self.pie = pie

    @classmethod
    def fresh(cls, task_id: int, prompt_len: int, embed_dim: int, num_layers: int,
              shared_layers: int, rank: int, pie_mode: str, seed: int):
        part = partition_layers(num_layers, shared_layers)
        rng = rng_for(seed, "generator", task_id)
        root = RootPrompt(
            task_id,
            key=Tensor(rng.normal(0.0, 0.02, size=(prompt_len, embed_dim)),
                       trainable=True, name="root.key"),
            value=Tensor(rng.normal(0.0, 0.02, size=(prompt_len, embed_dim)),
                         trainable=True, name="root.value"),
        )
        key_adapters = [
            GroupAdapter.fresh(g, "key", embed_dim, rank, rng, f"adapter.{g}.key")
            for g in range(part.num_groups)
        ]
        value_adapters = [
            GroupAdapter.fresh(g, "value", embed_dim, rank, rng, f"adapter.{g}.value")
            for g in range(part.num_groups)
        ]
        pie = PIETable.fresh(task_id, pie_mode, num_layers, prompt_len, embed_dim)
        return cls(task_id, part, root, key_adapters, value_adapters, pie)

    @classmethod
    def from_previous(cls, task_id: int, prev: "HlgpGenerator") -> "HlgpGenerator":
        """Deep-copy the preceding task's parameters as the trainable start."""
        root = RootPrompt(
            task_id,
            key=Tensor(prev.root.key.data.copy(), trainable=True, name="root.key"),
            value=Tensor(prev.root.value.data.copy(), trainable=True, name="root.value"),
        )

        def copy_adapter(a: GroupAdapter) -> GroupAdapter:
            return GroupAdapter(
                a.group, a.pathway,
                Tensor(a.down.data.copy(), trainable=True, name=a.down.name),
                Tensor(a.down_bias.data.copy(), trainable=True, name=a.down_bias.name),
                Tensor(a.up.data.copy(), trainable=True, name=a.up.name),
                Tensor(a.up_bias.data.copy(), trainable=True, name=a.up_bias.name),
            )

        key_adapters = [copy_adapter(a) for a in prev.key_adapters]
        value_adapters = [copy_adapter(a) for a in prev.value_adapters]
        trainable_pie = prev.pie.mode in ("shared", "non_shared")
        if prev.pie.mode == "non_shared":
            keys = [Tensor(t.data.copy(), trainable=True, name=t.name)
                    for t in prev.pie.key_tables]
            values = [Tensor(t.data.copy(), trainable=True, name=t.name)
                      for t in prev.pie.value_tables]
            pie = PIETable(task_id, prev.pie.mode, keys, values)
        else:
            tables = [Tensor(t.data.copy(), trainable=trainable_pie, name=t.name)
                      for t in prev.pie.key_tables]
            pie = PIETable(task_id, prev.pie.mode, tables, tables)
        return cls(task_id, prev.part, root, key_adapters, value_adapters, pie)

    def subprompts(self) -> SubPromptSet:
        return generate_subprompts(self.root, self.key_adapters,
                                   self.value_adapters, self.pie, self.part)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"root.key": self.root.key, "root.value": self.root.value}
        for a in self.key_adapters + self.value_adapters:
            for t in a.tensors():
                out[t.name] = t
        out.update(self.pie.tensors())
        return out

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.trainable}

    def freeze(self) -> None:
        for t in self.named_tensors().values():
            t.freeze()

    def is_frozen(self) -> bool:
        return not any(t.trainable for t in self.named_tensors().values())


class IndependentGenerator:
    """Baseline: a free key/value prompt pair per layer, no sharing."""

    prompt_mode = "independent_layerwise"

    def __init__(self, task_id: int, pairs: list[LayerPrompt]):
        self.task_id = task_id
        self.pairs = pairs

    @classmethod
    def fresh(cls, task_id: int, prompt_len: int, embed_dim: int, num_layers: int,
              seed: int):
        rng = rng_for(seed, "generator", task_id)
        pairs = [
            LayerPrompt(
                Tensor(rng.normal(0.0, 0.02, size=(prompt_len, embed_dim)),
                       trainable=True, name=f"layer.{i}.key"),
                Tensor(rng.normal(0.0, 0.02, size=(prompt_len, embed_dim)),
                       trainable=True, name=f"layer.{i}.value"),
            )
            for i in range(num_layers)
        ]
        return cls(task_id, pairs)

    @classmethod
    def from_previous(cls, task_id: int, prev: "IndependentGenerator"):
        pairs = [
            LayerPrompt(
                Tensor(p.key_prompt.data.copy(), trainable=True,
                       name=p.key_prompt.name),
                Tensor(p.value_prompt.data.copy(), trainable=True,
                       name=p.value_prompt.name),
            )
            for p in prev.pairs
        ]
        return cls(task_id, pairs)

    def subprompts(self) -> SubPromptSet:
        layers = [LayerPrompt(p.key_prompt, p.value_prompt) for p in self.pairs]
        return SubPromptSet(layers,
                            [p.key_prompt for p in self.pairs],
                            [p.value_prompt for p in self.pairs])

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for p in self.pairs:
            out[p.key_prompt.name] = p.key_prompt
            out[p.value_prompt.name] = p.value_prompt
        return out

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.trainable}

    def freeze(self) -> None:
        for t in self.named_tensors().values():
            t.freeze()

    def is_frozen(self) -> bool:
        return not any(t.trainable for t in self.named_tensors().values())


def make_generator(prompt_mode: str, task_id: int, prompt_len: int, embed_dim: int,
                   num_layers: int, shared_layers: int, rank: int, pie_mode: str,
                   seed: int):
    if prompt_mode == "independent_layerwise":
        return IndependentGenerator.fresh(task_id, prompt_len, embed_dim,
                                          num_layers, seed)
    if prompt_mode == "hlgp":
        pie_mode = "none"
    elif prompt_mode != "hlgp_pie":
        raise ConfigError(f"unknown prompt mode {prompt_mode!r}")
    return HlgpGenerator.fresh(task_id, prompt_len, embed_dim, num_layers,
                               shared_layers, rank, pie_mode, seed)


def clone_generator(task_id: int, prev):
    if isinstance(prev, IndependentGenerator):
        return IndependentGenerator.from_previous(task_id, prev)
    return HlgpGenerator.from_previous(task_id, prev)


# ---------------------------------------------------------------------------
# parameter accounting


def pie_param_count(pie_mode: str, num_layers: int, prompt_len: int,
                    embed_dim: int) -> int:
    if pie_mode == "shared":
        return num_layers * prompt_len * embed_dim
    if pie_mode == "non_shared":
        return 2 * num_layers * prompt_len * embed_dim
    if pie_mode in ("sinusoidal", "none"):
        return 0
    raise ConfigError(f"unknown pie mode {pie_mode!r}")


def param_breakdown(prompt_mode: str, embed_dim: int, prompt_len: int,
                    num_layers: int, shared_layers: int, rank: int,
                    pie_mode: str, classes_per_task: int,
                    tasks_so_far: int = 1) -> dict:
    """Exact trainable-scalar counts per component, per task and cumulative."""
    d, l, m = embed_dim, prompt_len, num_layers
    classifier = classes_per_task * (d + 1)
    if prompt_mode == "independent_layerwise":
        comps = {"prompts": m * 2 * l * d, "adapters": 0, "pie": 0,
                 "classifier": classifier}
    else:
        if m % shared_layers:
            raise ConfigError(
                f"shared_layers {shared_layers} does not divide layers {m}"
            )
        groups = m // shared_layers
        effective_pie = "none" if prompt_mode == "hlgp" else pie_mode
        comps = {
            "prompts": 2 * l * d,
            "adapters": groups * 2 * (d * rank + rank + rank * d + d),
            "pie": pie_param_count(effective_pie, m, l, d),
            "classifier": classifier,
        }
    per_task = sum(comps.values())
    return {
        "components": comps,
        "per_task": per_task,
        "cumulative": per_task * tasks_so_far,
    }


def count_trainable_params(prompt_mode: str, embed_dim: int, prompt_len: int,
                           num_layers: int, shared_layers: int, rank: int,
                           pie_mode: str, classes_per_task: int,
                           tasks_so_far: int = 1) -> int:
    return param_breakdown(prompt_mode, embed_dim, prompt_len, num_layers,
                           shared_layers, rank, pie_mode, classes_per_task,
                           tasks_so_far)["cumulative"]
