"""Decomposed prompt components: expand-and-freeze storage and per-image assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError, Tensor, cosine_similarity, stack


@dataclass
class PromptComponent:
    query: Tensor   # (d,)
    key: Tensor     # (d,)
    value: Tensor   # (L_p, d)
    owner_task: int
    frozen: bool = False

    def tensors(self) -> list[Tensor]:
        return [self.query, self.key, self.value]

    def freeze(self) -> None:
        for t in self.tensors():
            t.freeze()
        self.frozen = True

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(t.data).tobytes() for t in self.tensors())


@dataclass
class PromptAssembly:
    weights: Tensor   # alpha, (M,)
    prompt: Tensor    # (L_p, d)
    queries: Tensor   # q(x), (M, d)


@dataclass
class PromptBank:
    dim: int
    prompt_length: int = 4
    per_task: int = 2
    components: list[PromptComponent] = field(default_factory=list)
    num_tasks: int = 0

    def __len__(self) -> int:
        return len(self.components)

    def expand(self, task: int, seed: int) -> "PromptBank":
        """Freeze everything present and append ``per_task`` fresh components for ``task``."""
        if task != self.num_tasks + 1:
            raise ContractError(
                f"prompt bank holds {self.num_tasks} task(s); cannot expand for task {task}")
        for comp in self.components:
            if not comp.frozen:
                comp.freeze()
        rng = np.random.default_rng([seed, task])
        bound = 1.0 / np.sqrt(self.dim)
        for _ in range(self.per_task):
            self.components.append(PromptComponent(
                query=Tensor(rng.uniform(-bound, bound, self.dim), requires_grad=True),
                key=Tensor(rng.uniform(-bound, bound, self.dim), requires_grad=True),
                value=Tensor(rng.uniform(-bound, bound, (self.prompt_length, self.dim)),
                             requires_grad=True),
                owner_task=task,
            ))
        self.num_tasks = task
        return self

    def freeze_all(self) -> None:
        for comp in self.components:
            if not comp.frozen:
                comp.freeze()

    def trainable_parameters(self) -> tuple[list[Tensor], int]:
        params = [t for comp in self.components if not comp.frozen for t in comp.tensors()]
        return params, sum(t.size for t in params)

    def frozen_flags(self) -> list[bool]:
        return [c.frozen for c in self.components]

    def assemble(self, base_feature) -> PromptAssembly:
        return assemble_prompt(self, base_feature)


def assemble_prompt(bank: PromptBank, base_feature) -> PromptAssembly:
    """Image-conditioned prompt ``p = sum_i alpha_i v_i``.

    ``alpha_i`` is the raw cosine between ``base_feature * q_i`` and ``k_i``
    (no softmax); it is pinned to 0 when either side has zero norm.
    """
    if not bank.components:
        raise ContractError("cannot assemble a prompt from an empty bank")
    base = np.asarray(getattr(base_feature, "data", base_feature), dtype=np.float64).reshape(-1)
    if base.shape != (bank.dim,):
        raise ContractError(f"base feature must have {bank.dim} entries, got {base.shape}")

    weights, queries = [], []
    prompt = None
    for comp in bank.components:
        q = comp.query * base
        queries.append(q)
        if not np.any(q.data) or not np.any(comp.key.data):
            alpha = Tensor(0.0)
        else:
            alpha = cosine_similarity(q, comp.key)
        weights.append(alpha)
        term = alpha * comp.value
        prompt = term if prompt is None else prompt + term

    return PromptAssembly(weights=stack(weights), prompt=prompt, queries=stack(queries))
