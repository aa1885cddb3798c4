"""Fixed-seed stand-in for a text encoder.

Each vocabulary entry is expanded through the prompt template and hashed
together with the table seed into a per-row generator, so a row depends on
the full prompt text, nothing else. Same seed, same vocab, same template:
bit-identical embeddings.
"""

import hashlib
from dataclasses import dataclass, field

import torch

from ..errors import ConfigurationError, VocabularyError

DEFAULT_PROMPT_TEMPLATE = "a photo of a {class}"
TOKEN_POSITIONS = 4


def _row_seed(seed: int, prompt: str) -> int:
    digest = hashlib.sha256(f"{seed}\x1f{prompt}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def render_prompt(template: str, class_name: str) -> str:
    if "{class}" not in template:
        raise ConfigurationError("prompt template must contain the {class} placeholder")
    return template.replace("{class}", class_name)


@dataclass
class ConditioningTable:
    vocab: list[str]
    embed_dim: int
    embeddings: torch.Tensor  # [V, L, embed_dim]
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    seed: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigurationError("vocabulary contains duplicate class names")
        if self.embeddings.shape != (len(self.vocab), TOKEN_POSITIONS, self.embed_dim):
            raise ConfigurationError(
                f"embeddings must be [{len(self.vocab)},{TOKEN_POSITIONS},{self.embed_dim}], "
                f"got {tuple(self.embeddings.shape)}"
            )
        self._index = {name: i for i, name in enumerate(self.vocab)}

    def index(self, class_name: str) -> int:
        try:
            return self._index[class_name]
        except KeyError:
            raise VocabularyError(
                f"unknown class {class_name!r}; vocabulary: {', '.join(self.vocab)}"
            ) from None

    def rows(self, cond_id: torch.Tensor) -> torch.Tensor:
        """[N] ids -> [N, L, embed_dim] context for cross-attention."""
        cond_id = torch.as_tensor(cond_id, dtype=torch.long)
        if cond_id.numel() and (cond_id.min() < 0 or cond_id.max() >= len(self.vocab)):
            raise VocabularyError(
                f"cond ids must lie in [0, {len(self.vocab)}), got range "
                f"[{int(cond_id.min())}, {int(cond_id.max())}]"
            )
        return self.embeddings[cond_id]

    def pooled(self, cond_id: torch.Tensor) -> torch.Tensor:
        """Token-mean embedding per sample, used as the text side of the CLIP-style score."""
        return self.rows(cond_id).mean(dim=1)


def build_conditioning(
    vocab: list[str],
    embed_dim: int,
    seed: int = 0,
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
) -> ConditioningTable:
    if embed_dim < 1:
        raise ConfigurationError("embed_dim must be positive")
    rows = []
    for name in vocab:
        gen = torch.Generator().manual_seed(_row_seed(seed, render_prompt(prompt_template, name)))
        rows.append(torch.randn(TOKEN_POSITIONS, embed_dim, generator=gen))
    if not rows:
        raise ConfigurationError("vocabulary must be non-empty")
    return ConditioningTable(list(vocab), embed_dim, torch.stack(rows), prompt_template, seed)
