"""Prefix distillation: training progress, frozen backbone, defaults."""

from contextlib import contextmanager
from pathlib import Path

import pytest
import torch

from modelserve.models import backbone_checksum, build_backbone
from modelserve.prefix import (
    DEFAULT_BATCH,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_PREFIX_TOKENS,
    PrefixParaphraser,
    load_pair_corpus,
    load_prefixes,
    save_prefixes,
    train_prefix_alignment,
)

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "paraphrase_pairs.jsonl"


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"FAIL [{name}]")
        raise
    print(f"PASS [{name}]")


def _student(seed: int = 1234) -> PrefixParaphraser:
    return PrefixParaphraser(build_backbone(seed), DEFAULT_PREFIX_TOKENS, seed=seed)


def test_training_defaults():
    assert DEFAULT_PREFIX_TOKENS == 20
    assert DEFAULT_EPOCHS == 2
    assert DEFAULT_BATCH == 64
    assert DEFAULT_LR == 1e-4


def test_corpus_fixture_has_64_pairs():
    assert len(load_pair_corpus(CORPUS)) == 64


def test_distillation_progress_and_frozen_backbone():
    with criterion(
        "secondary: alignment loss strictly decreases epoch 0 -> 2 on the "
        "64-pair corpus; backbone checksum unchanged"
    ):
        student = _student()
        before = backbone_checksum(student.backbone)
        result = train_prefix_alignment(student, CORPUS)  # default arguments
        assert len(result.losses) == 3  # epoch 0 eval + one per epoch
        assert result.losses[1] < result.losses[0]
        assert result.losses[2] < result.losses[1]
        assert result.final < result.initial
        assert backbone_checksum(student.backbone) == before
        assert not result.diverged


def test_stronger_steps_still_freeze_backbone():
    student = _student()
    before = backbone_checksum(student.backbone)
    result = train_prefix_alignment(student, CORPUS, epochs=2, batch=8, lr=1e-2)
    assert result.final < result.initial
    assert backbone_checksum(student.backbone) == before


def test_zero_epochs_leaves_prefixes_unchanged():
    student = _student()
    enc = student.encoder_prefix.detach().clone()
    dec = student.decoder_prefix.detach().clone()
    result = train_prefix_alignment(student, CORPUS, epochs=0)
    assert torch.equal(student.encoder_prefix, enc)
    assert torch.equal(student.decoder_prefix, dec)
    assert len(result.losses) == 1  # the pre-training evaluation only


def test_only_prefixes_require_grad():
    student = _student()
    trainable = [n for n, p in student.named_parameters() if p.requires_grad]
    assert sorted(trainable) == ["decoder_prefix", "encoder_prefix"]


def test_prefix_save_load_round_trip(tmp_path):
    student = _student()
    train_prefix_alignment(student, CORPUS, epochs=1, batch=16, lr=1e-3)
    save_prefixes(student, tmp_path / "prefix.pt")
    fresh = _student()
    assert not torch.equal(fresh.encoder_prefix, student.encoder_prefix)
    load_prefixes(fresh, tmp_path / "prefix.pt")
    assert torch.equal(fresh.encoder_prefix, student.encoder_prefix)
    assert torch.equal(fresh.decoder_prefix, student.decoder_prefix)


def test_divergence_flag_trips_after_three_increasing_evals(monkeypatch):
    from modelserve import prefix as prefix_mod

    # call order: epoch-0 eval, then per epoch one step loss + one eval;
    # three consecutive increasing evals (1.1, 1.2, 1.3) trip the flag
    values = iter([1.0, 9.0, 1.1, 9.0, 1.2, 9.0, 1.3])

    def fake_loss(student, pairs):
        return torch.tensor(next(values), requires_grad=True)

    monkeypatch.setattr(prefix_mod, "_alignment_loss", fake_loss)
    student = _student()
    result = train_prefix_alignment(student, [("a", "b")], epochs=3, batch=1, lr=1e-4)
    assert result.diverged


def test_bad_training_args_rejected():
    student = _student()
    with pytest.raises(ValueError):
        train_prefix_alignment(student, CORPUS, epochs=-1)
    with pytest.raises(ValueError):
        train_prefix_alignment(student, CORPUS, batch=0)
    with pytest.raises(ValueError):
        train_prefix_alignment(student, CORPUS, lr=0.0)
