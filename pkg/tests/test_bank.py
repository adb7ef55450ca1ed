import numpy as np
import pytest

from selfcon_lab.bank import MemoryBank, augment_candidates, push_batch
from selfcon_lab.encoder import ExitOutputs
from selfcon_lab.losses import (LossConfig, brute_force_oracle, build_index_sets, contrastive_loss,
                                restrict_anchors)
from selfcon_lab.tensor import Tensor


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _outputs(mats, grad=False):
    return ExitOutputs([Tensor(m, requires_grad=grad) for m in mats], [], [])


class TestFifo:
    def test_keeps_last_entries_in_order(self):
        bank = MemoryBank(capacity=4)
        for k in range(6):
            bank.push(np.array([float(k), 0.0]), label=k, exit_index=0, is_backbone=True)
        assert bank.labels().tolist() == [2, 3, 4, 5]
        assert bank.embedding_matrix()[:, 0].tolist() == [2.0, 3.0, 4.0, 5.0]

    def test_push_batch_counts(self, rng):
        bank = MemoryBank(capacity=100)
        push_batch(bank, _outputs([_unit(rng, 3, 4), _unit(rng, 3, 4)]), [0, 1, 2])
        assert len(bank) == 6
        assert [k for _, _, k in bank.entries()] == [0, 0, 0, 1, 1, 1]

    def test_entries_detached_and_read_only(self, rng):
        z = Tensor(_unit(rng, 2, 3), requires_grad=True)
        bank = MemoryBank(capacity=8)
        push_batch(bank, ExitOutputs([z], [], []), [0, 1])
        z.data[0, 0] = 99.0
        emb = bank.entries()[0][0]
        assert emb[0] != 99.0
        with pytest.raises(ValueError):
            emb[0] = 1.0

    def test_backbone_filter(self, rng):
        bank = MemoryBank(capacity=10, exits="backbone")
        push_batch(bank, _outputs([_unit(rng, 2, 3), _unit(rng, 2, 3)]), [0, 1])
        assert len(bank) == 4 and len(bank.entries()) == 2

    def test_dim_mismatch(self):
        bank = MemoryBank()
        bank.push(np.ones(3), 0, 0, True)
        with pytest.raises(ValueError):
            bank.push(np.ones(4), 0, 0, True)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            MemoryBank(capacity=-1)
        with pytest.raises(ValueError):
            MemoryBank(exits="sub")


class TestCandidates:
    def test_empty_bank_unchanged(self):
        sets = build_index_sets("supcon-s", [0, 1, 0], False, 1, 3)
        assert augment_candidates(sets, MemoryBank()) is sets

    def test_counts(self, rng):
        sets = build_index_sets("supcon-s", [0, 1, 0], False, 1, 3)
        bank = MemoryBank()
        for y in (0, 1, 0, 2):
            bank.push(_unit(rng, 1, 4)[0], y, 0, True)
        aug = augment_candidates(sets, bank, anchor_labels=[0, 1, 0])
        a = sets.anchor_index(0, 0)
        assert len(aug.positives(a)) == len(sets.positives(a)) + 2
        assert len(aug.candidates(a)) == len(sets.candidates(a)) + 4
        aug.check()

    def test_unsupervised_bank_negatives_only(self, rng):
        sets = build_index_sets("selfcon-s", [0, 1], False, 2, 2)
        bank = MemoryBank()
        bank.push(_unit(rng, 1, 4)[0], 0, 0, True)
        aug = augment_candidates(sets, bank)
        assert not aug.positive[:, -1].any() and aug.candidate[:, -1].all()


class TestBankLoss:
    def test_capacity_zero_bitwise(self, rng):
        mats = [_unit(rng, 4, 3), _unit(rng, 4, 3)]
        labels = [0, 1, 0, 1]
        cfg = LossConfig("selfcon-s", tau=0.1)
        bank = MemoryBank(capacity=0)
        push_batch(bank, _outputs(mats), labels)
        assert contrastive_loss(_outputs(mats), labels, cfg, bank=bank).item() == \
            contrastive_loss(_outputs(mats), labels, cfg).item()

    def test_matches_oracle(self, rng):
        bank = MemoryBank(capacity=5)
        push_batch(bank, _outputs([_unit(rng, 3, 4), _unit(rng, 3, 4)]), [0, 1, 2])
        mats = [_unit(rng, 3, 4), _unit(rng, 3, 4)]
        labels = [0, 2, 2]
        cfg = LossConfig("selfcon-s", tau=0.3)
        fast = contrastive_loss(_outputs(mats), labels, cfg, bank=bank).item()
        assert abs(fast - brute_force_oracle(_outputs(mats), labels, cfg, bank=bank)) < 1e-10

    def test_no_grad_into_bank(self, rng):
        bank = MemoryBank()
        push_batch(bank, _outputs([_unit(rng, 3, 4)]), [0, 1, 0])
        before = bank.embedding_matrix().copy()
        out = _outputs([_unit(rng, 3, 4)], grad=True)
        contrastive_loss(out, [0, 1, 1], LossConfig("supcon-s"), bank=bank).backward()
        assert out.embeddings[0].grad is not None
        np.testing.assert_array_equal(bank.embedding_matrix(), before)

    def test_bank_dim_mismatch(self, rng):
        bank = MemoryBank()
        bank.push(np.ones(5) / np.sqrt(5), 0, 0, True)
        with pytest.raises(ValueError):
            contrastive_loss(_outputs([_unit(rng, 2, 3)]), [0, 0], LossConfig("supcon-s"), bank=bank)

    def test_bank_positives_pull_anchor_to_class_mean(self, rng):
        bank = MemoryBank()
        same = _unit(rng, 3, 4)
        for z in same:
            bank.push(z, 0, 0, True)
        for z in _unit(rng, 3, 4):
            bank.push(z, 1, 0, True)
        mats = [_unit(rng, 2, 4)]
        labels = np.array([0, 1])
        cfg = LossConfig("supcon-s", tau=0.5)
        sets = build_index_sets("supcon-s", labels, False, 1, 2)
        only = restrict_anchors(sets, [True, False])
        out = _outputs(mats, grad=True)
        contrastive_loss(out, labels, cfg, sets=only, bank=bank).backward()
        toward_mean = same.mean(axis=0) - mats[0][0]
        assert float(out.embeddings[0].grad[0] @ toward_mean) < 0
