import math

import pytest
import torch

from noduleclip.objective import (
    LossWeights,
    ObjectiveError,
    clip_loss,
    info_nce_image,
    info_nce_semantic,
    inverse_frequency_class_weights,
    total_loss,
    weighted_cross_entropy,
)


def normalized(x):
    return torch.nn.functional.normalize(x, dim=-1)


class TestInfoNCE:
    def test_identical_rows_give_ln_b(self):
        for b in (2, 4, 16):
            emb = normalized(torch.ones(b, 256, dtype=torch.float64))
            for tau in (0.03, 0.5, 1.0):
                loss = info_nce_image(emb, emb, tau)
                assert abs(float(loss) - math.log(b)) < 1e-6

    def test_b2_closed_form(self):
        image = torch.eye(2, 8, dtype=torch.float64)
        text = torch.eye(2, 8, dtype=torch.float64)
        expected = math.log(1.0 + math.exp(-1.0))
        assert abs(float(info_nce_image(image, text, 1.0)) - expected) < 1e-6
        assert abs(float(info_nce_semantic(image, text, 1.0)) - expected) < 1e-6

    def test_saturation_as_tau_shrinks(self):
        image = torch.eye(2, 8, dtype=torch.float64)
        text = torch.eye(2, 8, dtype=torch.float64)
        assert float(info_nce_image(image, text, 1e-3)) < 1e-8

    def test_semantic_is_transposed_softmax(self):
        rng = torch.Generator().manual_seed(0)
        image = torch.randn(2, 16, generator=rng, dtype=torch.float64)
        text = torch.randn(2, 16, generator=rng, dtype=torch.float64)
        tau = 0.7
        sim = normalized(image) @ normalized(text).T / tau
        # hand-evaluated transposed softmax
        expected = -0.5 * sum(
            float(sim[i, i] - torch.logsumexp(sim[:, i], dim=0)) for i in range(2)
        )
        assert abs(float(info_nce_semantic(image, text, tau)) - expected) < 1e-8

    def test_symmetric_matrix_equates_both_terms(self):
        rng = torch.Generator().manual_seed(1)
        base = torch.randn(4, 32, generator=rng, dtype=torch.float64)
        loss_i = info_nce_image(base, base, 0.2)
        loss_s = info_nce_semantic(base, base, 0.2)
        assert abs(float(loss_i) - float(loss_s)) < 1e-10
        assert abs(float(clip_loss(base, base, 0.2)) - float(loss_i)) < 1e-10

    def test_clip_loss_is_mean_of_terms(self):
        rng = torch.Generator().manual_seed(2)
        image = torch.randn(6, 64, generator=rng, dtype=torch.float64)
        text = torch.randn(6, 64, generator=rng, dtype=torch.float64)
        expected = 0.5 * (
            float(info_nce_image(image, text, 0.3))
            + float(info_nce_semantic(image, text, 0.3))
        )
        assert abs(float(clip_loss(image, text, 0.3)) - expected) < 1e-7

    def test_batch_of_one_rejected(self):
        emb = torch.ones(1, 8)
        with pytest.raises(ObjectiveError):
            info_nce_image(emb, emb, 1.0)

    def test_nonpositive_temperature_rejected(self):
        emb = torch.ones(2, 8)
        for tau in (0.0, -0.5):
            with pytest.raises(ObjectiveError):
                info_nce_image(emb, emb, tau)

    def test_permutation_equivariance(self):
        rng = torch.Generator().manual_seed(3)
        image = torch.randn(8, 32, generator=rng, dtype=torch.float64)
        text = torch.randn(8, 32, generator=rng, dtype=torch.float64)
        perm = torch.randperm(8, generator=rng)
        before = float(clip_loss(image, text, 0.1))
        after = float(clip_loss(image[perm], text[perm], 0.1))
        assert abs(before - after) < 1e-7


class TestWeightedCrossEntropy:
    def test_uniform_prediction_ln2(self):
        logits = torch.zeros(5, 2)
        for label in (0, 1):
            labels = torch.full((5,), label)
            loss = weighted_cross_entropy(logits, labels, torch.ones(2))
            assert abs(float(loss) - math.log(2)) < 1e-6

    def test_zero_total_weight_rejected(self):
        logits = torch.zeros(3, 2)
        labels = torch.ones(3, dtype=torch.long)
        with pytest.raises(ObjectiveError, match="zero total weight"):
            weighted_cross_entropy(logits, labels, torch.tensor([1.0, 0.0]))

    def test_both_weights_zero_rejected(self):
        with pytest.raises(ObjectiveError):
            weighted_cross_entropy(
                torch.zeros(2, 2), torch.tensor([0, 1]), torch.zeros(2)
            )

    def test_matches_per_term_oracle(self):
        rng = torch.Generator().manual_seed(4)
        logits = torch.randn(2, 2, generator=rng, dtype=torch.float64)
        labels = torch.tensor([0, 1])
        weights = torch.tensor([1.0, 3.0], dtype=torch.float64)
        log_probs = torch.log_softmax(logits, dim=-1)
        numer = -1.0 * log_probs[0, 0] - 3.0 * log_probs[1, 1]
        expected = float(numer / (1.0 + 3.0))
        got = float(weighted_cross_entropy(logits, labels, weights))
        assert abs(got - expected) < 1e-7

    def test_invalid_label_rejected(self):
        with pytest.raises(ObjectiveError):
            weighted_cross_entropy(torch.zeros(2, 2), torch.tensor([0, 2]), torch.ones(2))


class TestClassWeights:
    def test_inverse_frequency_mean_one(self):
        labels = torch.tensor([0, 0, 0, 1])
        weights = inverse_frequency_class_weights(labels)
        assert abs(float(weights.mean()) - 1.0) < 1e-9
        assert weights[1] > weights[0]
        assert abs(float(weights[1] / weights[0]) - 3.0) < 1e-9

    def test_single_class_rejected(self):
        with pytest.raises(ObjectiveError):
            inverse_frequency_class_weights(torch.zeros(4, dtype=torch.long))


class TestTotalLoss:
    def make_batch(self, b=4, seed=5):
        rng = torch.Generator().manual_seed(seed)
        return (
            torch.randn(b, 256, generator=rng, dtype=torch.float64),
            torch.randn(b, 256, generator=rng, dtype=torch.float64),
            torch.randint(0, 2, (b,), generator=rng),
            torch.randn(b, 2, generator=rng, dtype=torch.float64),
            torch.randn(b, 2, generator=rng, dtype=torch.float64),
        )

    def test_projection_to_clip_only(self):
        image, text, labels, li, lt = self.make_batch()
        terms = total_loss(
            image, text, labels, li, lt, 0.5,
            LossWeights(w_clip=1.0, w_ce_image=0.0, w_ce_text=0.0),
        )
        assert abs(float(terms.total) - float(clip_loss(image, text, 0.5))) < 1e-9

    def test_scaling(self):
        image, text, labels, li, lt = self.make_batch(seed=6)
        terms = total_loss(
            image, text, labels, li, lt, 0.5,
            LossWeights(w_clip=2.0, w_ce_image=0.0, w_ce_text=0.0),
        )
        assert abs(float(terms.total) - 2.0 * float(clip_loss(image, text, 0.5))) < 1e-9

    def test_default_weights_sum_terms(self):
        image, text, labels, li, lt = self.make_batch(seed=7)
        labels = torch.tensor([0, 1, 0, 1])
        terms = total_loss(image, text, labels, li, lt, 0.3)
        expected = (
            float(clip_loss(image, text, 0.3))
            + float(weighted_cross_entropy(li, labels, torch.ones(2, dtype=torch.float64)))
            + float(weighted_cross_entropy(lt, labels, torch.ones(2, dtype=torch.float64)))
        )
        assert abs(float(terms.total) - expected) < 1e-7

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ObjectiveError):
            LossWeights(w_clip=0.0, w_ce_image=0.0, w_ce_text=0.0)


class TestGradients:
    def test_losses_match_finite_differences(self):
        torch.manual_seed(8)
        b = 5
        image = torch.randn(b, 16, dtype=torch.float64, requires_grad=True)
        text = torch.randn(b, 16, dtype=torch.float64, requires_grad=True)
        log_tau = torch.tensor(math.log(0.2), dtype=torch.float64, requires_grad=True)

        def forward():
            return clip_loss(image, text, log_tau.exp())

        loss = forward()
        grads = torch.autograd.grad(loss, [image, text, log_tau])
        h = 1e-6
        rng = torch.Generator().manual_seed(9)
        for tensor, grad in zip([image, text, log_tau], grads):
            flat = tensor.detach().reshape(-1)
            n_checks = min(10, flat.numel())
            for k in torch.randperm(flat.numel(), generator=rng)[:n_checks]:
                orig = float(flat[k])
                flat[k] = orig + h
                up = float(forward())
                flat[k] = orig - h
                down = float(forward())
                flat[k] = orig
                fd = (up - down) / (2 * h)
                analytic = float(grad.reshape(-1)[k])
                denom = max(abs(fd), abs(analytic), 1e-8)
                assert abs(fd - analytic) / denom < 1e-4

    def test_temperature_stays_positive_under_steps(self):
        torch.manual_seed(10)
        log_tau = torch.tensor(math.log(0.03), requires_grad=True)
        opt = torch.optim.SGD([log_tau], lr=0.5)
        image = torch.randn(4, 8)
        text = torch.randn(4, 8)
        for _ in range(50):
            loss = clip_loss(image, text, log_tau.exp())
            opt.zero_grad()
            loss.backward()
            opt.step()
            assert float(log_tau.exp().detach()) > 0
