"""Prefix-tuned prompt-free paraphraser and its distillation trainer.

The student prepends learnable virtual tokens to both the encoder and the
decoder and is trained to match the token distributions of the prompted
teacher (same frozen backbone fed "paraphrase: <x>").
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .models import (
    PAD_ID,
    PARAPHRASE_PROMPT,
    build_backbone,
    encoder_states,
    sample_from_states,
    text_to_ids,
)

log = logging.getLogger(__name__)

# Defaults: 20 virtual tokens on both sides, 2 epochs, batch 64, lr 1e-4.
DEFAULT_PREFIX_TOKENS = 20
DEFAULT_EPOCHS = 2
DEFAULT_BATCH = 64
DEFAULT_LR = 1e-4


class PrefixParaphraser(nn.Module):
    def __init__(self, backbone, prefix_tokens: int = DEFAULT_PREFIX_TOKENS, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        for param in self.backbone.parameters():
            param.requires_grad_(False)
        d_model = backbone.config.d_model
        torch.manual_seed(seed + 2)
        self.encoder_prefix = nn.Parameter(torch.randn(prefix_tokens, d_model) * 0.1)
        self.decoder_prefix = nn.Parameter(torch.randn(prefix_tokens, d_model) * 0.1)

    @property
    def prefix_tokens(self) -> int:
        return self.encoder_prefix.shape[0]

    def encode(self, text: str) -> torch.Tensor:
        """Prompt-free latent: encoder states over [prefix; input tokens]."""
        return encoder_states(self.backbone, text, prefix=self.encoder_prefix)

    def decode(self, states: torch.Tensor, top_p: float, temperature: float,
               generator: torch.Generator, max_new_tokens: int = 24) -> str:
        return sample_from_states(
            self.backbone,
            states,
            top_p,
            temperature,
            generator,
            max_new_tokens=max_new_tokens,
            decoder_prefix=self.decoder_prefix,
        )

    def student_logits(self, source_ids: torch.Tensor, decoder_input_ids: torch.Tensor) -> torch.Tensor:
        """Logits over target positions, prompt-free with both prefixes."""
        batch = source_ids.shape[0]
        k = self.prefix_tokens
        enc = torch.cat(
            [self.encoder_prefix.unsqueeze(0).expand(batch, -1, -1), self.backbone.shared(source_ids)],
            dim=1,
        )
        enc_mask = torch.cat(
            [torch.ones(batch, k, dtype=torch.long), (source_ids != PAD_ID).long()], dim=1
        )
        dec = torch.cat(
            [
                self.decoder_prefix.unsqueeze(0).expand(batch, -1, -1),
                self.backbone.shared(decoder_input_ids),
            ],
            dim=1,
        )
        logits = self.backbone(
            inputs_embeds=enc, attention_mask=enc_mask, decoder_inputs_embeds=dec
        ).logits
        return logits[:, k:, :]


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)  # [epoch 0 (pre-train), 1, ..]
    diverged: bool = False

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]


def load_pair_corpus(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            pairs.append((record["source"], record["paraphrase"]))
    if not pairs:
        raise ValueError(f"paraphrase corpus {path} is empty")
    return pairs


def _pad_batch(id_lists: list[list[int]]) -> torch.Tensor:
    width = max(len(ids) for ids in id_lists)
    return torch.tensor([ids + [PAD_ID] * (width - len(ids)) for ids in id_lists])


def _alignment_loss(student: PrefixParaphraser, pairs: list[tuple[str, str]]) -> torch.Tensor:
    """Cross-entropy between prompted-teacher and prompt-free-student
    distributions over the teacher-forced paraphrase targets."""
    backbone = student.backbone
    source_ids = _pad_batch([text_to_ids(src) for src, _ in pairs])
    teacher_ids = _pad_batch([text_to_ids(PARAPHRASE_PROMPT + src) for src, _ in pairs])
    target_ids = _pad_batch([text_to_ids(tgt) for _, tgt in pairs])
    decoder_input = torch.cat(
        [torch.full((target_ids.shape[0], 1), PAD_ID), target_ids[:, :-1]], dim=1
    )
    with torch.no_grad():
        teacher_logits = backbone(
            input_ids=teacher_ids,
            attention_mask=(teacher_ids != PAD_ID).long(),
            decoder_input_ids=decoder_input,
        ).logits
        teacher_probs = torch.softmax(teacher_logits, dim=-1)
    student_log = torch.log_softmax(student.student_logits(source_ids, decoder_input), dim=-1)
    token_ce = -(teacher_probs * student_log).sum(dim=-1)
    mask = (target_ids != PAD_ID).float()
    return (token_ce * mask).sum() / mask.sum()


def train_prefix_alignment(
    student: PrefixParaphraser,
    corpus: list[tuple[str, str]] | str | Path,
    epochs: int = DEFAULT_EPOCHS,
    batch: int = DEFAULT_BATCH,
    lr: float = DEFAULT_LR,
) -> TrainResult:
    """Distill prompted behavior into the prefixes; backbone stays frozen.

    losses[0] is the pre-training loss over the corpus, then one entry per
    epoch. The diverged flag trips after 3 consecutive increasing evals.
    """
    if isinstance(corpus, (str, Path)):
        corpus = load_pair_corpus(corpus)
    if epochs < 0 or batch < 1 or lr <= 0:
        raise ValueError("epochs must be >= 0, batch >= 1, lr > 0")
    optimizer = torch.optim.Adam([student.encoder_prefix, student.decoder_prefix], lr=lr)
    result = TrainResult()
    with torch.no_grad():
        result.losses.append(float(_alignment_loss(student, corpus)))
    increases = 0
    for epoch in range(epochs):
        for start in range(0, len(corpus), batch):
            optimizer.zero_grad()
            loss = _alignment_loss(student, corpus[start : start + batch])
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            epoch_loss = float(_alignment_loss(student, corpus))
        log.info("alignment loss after epoch %d: %.6f", epoch + 1, epoch_loss)
        increases = increases + 1 if epoch_loss > result.losses[-1] else 0
        if increases >= 3:
            result.diverged = True
        result.losses.append(epoch_loss)
    return result


def save_prefixes(student: PrefixParaphraser, path: str | Path) -> None:
    torch.save(
        {"encoder_prefix": student.encoder_prefix.detach(), "decoder_prefix": student.decoder_prefix.detach()},
        path,
    )


def load_prefixes(student: PrefixParaphraser, path: str | Path) -> None:
    state = torch.load(path, weights_only=True)
    with torch.no_grad():
        student.encoder_prefix.copy_(state["encoder_prefix"])
        student.decoder_prefix.copy_(state["decoder_prefix"])
