import math

import numpy as np
import pytest
import torch

from oracles import oracle_grid_encode, oracle_grid_roundtrip, oracle_softmax
from sketchkp.locator import (
    GridError,
    GridLocator,
    classification_loss,
    classification_loss_from_logits,
    decode_grid,
    encode_grid_target,
    offset_loss,
)


@pytest.mark.parametrize(
    "u, L, label, offset",
    [
        ((-1.0, -1.0), 8, 0, (-1.0, -1.0)),
        ((0.0, 0.0), 12, 78, (-1.0, -1.0)),
        ((1.0, 1.0), 8, 63, (1.0, 1.0)),
    ],
)
def test_encode_examples(u, L, label, offset):
    lab, off = encode_grid_target(torch.tensor(u), L)
    assert lab.item() == label
    assert off.tolist() == pytest.approx(offset)
    assert oracle_grid_encode(u, L) == (label, pytest.approx(offset))


def test_encode_out_of_range():
    with pytest.raises(GridError):
        encode_grid_target(torch.tensor([1.5, 0.0]), 8)


def test_decode_examples():
    assert decode_grid(torch.tensor(0), torch.tensor([0.0, 0.0]), 8).tolist() == pytest.approx([-0.875, -0.875])
    assert decode_grid(torch.tensor(78), torch.tensor([-1.0, -1.0]), 12).tolist() == pytest.approx([0.0, 0.0])
    with pytest.raises(GridError):
        decode_grid(torch.tensor(64), torch.zeros(2), 8)


@pytest.mark.parametrize("L", [8, 12, 16])
def test_round_trip_and_label_range(L):
    rng = np.random.default_rng(L)
    u = torch.tensor(rng.uniform(-0.999, 0.999, (100000, 2)))
    label, offset = encode_grid_target(u, L)
    assert int(label.min()) >= 0 and int(label.max()) < L * L
    assert float(offset.abs().max()) <= 1.0
    assert torch.allclose(decode_grid(label, offset, L), u, atol=1e-6, rtol=0)
    # boundary maps to the outermost cell
    edge, _ = encode_grid_target(torch.tensor([[1.0, 1.0], [-1.0, 1.0]]), L)
    assert edge.tolist() == [L * L - 1, L * (L - 1)]


def test_round_trip_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L = int(rng.choice([8, 12, 16]))
        u = rng.uniform(-0.999, 0.999, 2)
        label, offset = encode_grid_target(torch.tensor(u), L)
        assert (label.item(), tuple(offset.tolist())) == (oracle_grid_encode(tuple(u), L)[0], pytest.approx(oracle_grid_encode(tuple(u), L)[1]))
        np.testing.assert_allclose(oracle_grid_roundtrip(tuple(u), L), u, atol=1e-9)


class TestHeads:
    def make(self, d=6, scales=(2, 8)):
        return GridLocator(d, list(scales)).double()

    def test_zero_head_uniform(self):
        loc = self.make()
        for p in loc.parameters():
            torch.nn.init.zeros_(p)
        probs = loc.classify_grid(torch.randn(6, dtype=torch.float64), 1)
        assert torch.allclose(probs, torch.full((64,), 1 / 64, dtype=torch.float64))
        assert torch.equal(loc.regress_offset(torch.randn(6, dtype=torch.float64), 0), torch.zeros(2, dtype=torch.float64))

    def test_probabilities_sum_to_one(self):
        loc = self.make()
        probs = loc.classify_grid(torch.randn(10, 6, dtype=torch.float64), 1)
        assert torch.allclose(probs.sum(-1), torch.ones(10, dtype=torch.float64), atol=1e-6)
        assert (probs > 0).all()

    def test_hand_set_2x2(self):
        loc = self.make()
        with torch.no_grad():
            loc.classifiers[0].weight.zero_()
            loc.classifiers[0].bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))
        probs = loc.classify_grid(torch.randn(6, dtype=torch.float64), 0)
        expected = oracle_softmax([1.0, 0.0, 0.0, 0.0])
        assert probs.tolist() == pytest.approx(expected, abs=1e-12)
        assert probs.tolist() == pytest.approx([0.4754, 0.1749, 0.1749, 0.1749], abs=1e-4)

    def test_regressor_linear_and_oracle(self):
        loc = self.make()
        with torch.no_grad():
            loc.regressors[1].bias.zero_()
        psi = torch.randn(6, dtype=torch.float64)
        out = loc.regress_offset(psi, 1)
        assert torch.allclose(loc.regress_offset(2 * psi, 1), 2 * out)
        W = loc.regressors[1].weight.detach().tolist()
        ref = [sum(W[o][i] * psi[i].item() for i in range(6)) for o in range(2)]
        assert out.tolist() == pytest.approx(ref, abs=1e-7)

    def test_unknown_scale(self):
        with pytest.raises(GridError):
            self.make().classify_grid(torch.zeros(6, dtype=torch.float64), 5)

    def test_argmax_invariant_to_logit_shift(self):
        loc = self.make()
        psi = torch.randn(4, 6, dtype=torch.float64)
        a = loc.logits(psi, 1).argmax(-1)
        with torch.no_grad():
            loc.classifiers[1].bias += 3.7
        assert torch.equal(loc.logits(psi, 1).argmax(-1), a)

    def test_predict_mean_across_scales(self):
        loc = GridLocator(3, [2, 4]).double()
        with torch.no_grad():
            for p in loc.parameters():
                p.zero_()
            # scale 2: cell 3 centre (0.5, 0.5); scale 4: cell 5 centre (-0.25, -0.25)
            loc.classifiers[0].bias[3] = 5.0
            loc.classifiers[1].bias[5] = 5.0
        pred, per_scale = loc.predict_keypoint(torch.zeros(3, dtype=torch.float64))
        assert per_scale.tolist() == [pytest.approx([0.5, 0.5]), pytest.approx([-0.25, -0.25])]
        assert pred.tolist() == pytest.approx([0.125, 0.125])

    def test_predict_identical_scales(self):
        loc = GridLocator(3, [4, 8]).double()
        with torch.no_grad():
            for p in loc.parameters():
                p.zero_()
            loc.classifiers[0].bias[5] = 1.0  # (1,1) at L=4 -> centre (-0.25,-0.25)
            loc.classifiers[1].bias[2 * 8 + 2] = 1.0
            loc.regressors[1].bias.fill_(1.0)  # (2,2)+1 edge at L=8 -> -0.25
            loc.regressors[0].bias.fill_(0.0)
        pred, _ = loc.predict_keypoint(torch.zeros(3, dtype=torch.float64))
        assert pred.tolist() == pytest.approx([-0.25, -0.25])

    def test_predict_clamps_offsets_and_uses_gt_in_training(self):
        loc = GridLocator(3, [4]).double()
        with torch.no_grad():
            for p in loc.parameters():
                p.zero_()
            loc.regressors[0].bias.fill_(7.0)
        pred, _ = loc.predict_keypoint(torch.zeros(3, dtype=torch.float64), gt_labels=[torch.tensor(15)])
        # cell (3,3) plus clamped offset 1 -> far corner
        assert pred.tolist() == pytest.approx([1.0, 1.0])


class TestLosses:
    def test_cross_entropy_values(self):
        assert classification_loss(torch.tensor([0.0, 1.0, 0.0]), 1).item() == 0.0
        assert classification_loss(torch.full((64,), 1 / 64, dtype=torch.float64), 5).item() == pytest.approx(math.log(64), abs=1e-6)
        assert classification_loss(torch.full((144,), 1 / 144, dtype=torch.float64), 5).item() == pytest.approx(4.9698, abs=1e-4)
        with pytest.raises(GridError):
            classification_loss(torch.full((4,), 0.25), 4)

    def test_logits_form_agrees(self):
        logits = torch.randn(5, 16, dtype=torch.float64)
        gt = torch.randint(0, 16, (5,))
        a = classification_loss_from_logits(logits, gt).sum()
        b = classification_loss(torch.softmax(logits, -1), gt)
        assert a.item() == pytest.approx(b.item(), rel=1e-12)

    def test_offset_loss(self):
        assert offset_loss(torch.zeros(2), torch.zeros(2)).item() == 0.0
        assert offset_loss(torch.tensor([0.5, -0.5]), torch.zeros(2)).item() == 1.0
        a, b = torch.randn(2), torch.randn(2)
        assert offset_loss(a, b).item() == offset_loss(b, a).item()

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            logits = torch.tensor(rng.normal(size=16), requires_grad=True)
            gt = int(rng.integers(16))
            ce = lambda z: classification_loss(torch.softmax(z, -1), gt)
            ce(logits).backward()
            num = np.array([
                (ce(logits.detach() + 1e-4 * e).item() - ce(logits.detach() - 1e-4 * e).item()) / 2e-4
                for e in torch.eye(16, dtype=torch.float64)
            ])
            np.testing.assert_allclose(logits.grad.numpy(), num, rtol=1e-3, atol=1e-7)

            pred = torch.tensor(rng.uniform(-1, 1, 2), requires_grad=True)
            target = torch.tensor(rng.uniform(-1, 1, 2))
            offset_loss(pred, target).backward()
            num = np.array([
                (offset_loss(pred.detach() + 1e-4 * e, target).item() - offset_loss(pred.detach() - 1e-4 * e, target).item()) / 2e-4
                for e in torch.eye(2, dtype=torch.float64)
            ])
            np.testing.assert_allclose(pred.grad.numpy(), num, rtol=1e-3)
