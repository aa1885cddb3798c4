import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slimdiff.core import LatentBatch, make_scheduler
from slimdiff.distill import (
    DistillConfig,
    TapProjection,
    class_logits,
    compute_losses,
    derive_logits,
    distill_step,
    feature_loss,
    feature_vector,
    hard_loss,
    make_readout,
    soft_loss,
    total_loss,
)
from slimdiff.errors import ConfigurationError, DimensionError, ValidationError
from slimdiff.unet import original_spec, student_spec
from slimdiff.unet.model import materialize


# -- scalar-loop oracles ----------------------------------------------------

def _softmax_row(row, temperature=1.0):
    scaled = [v / temperature for v in row]
    peak = max(scaled)
    exps = [math.exp(v - peak) for v in scaled]
    norm = sum(exps)
    return [v / norm for v in exps]


def oracle_soft(teacher, student, temperature):
    acc = 0.0
    for trow, srow in zip(teacher, student):
        pt = _softmax_row(trow, temperature)
        ps = _softmax_row(srow, temperature)
        acc += sum(p * (math.log(p) - math.log(q)) for p, q in zip(pt, ps))
    return temperature * temperature * acc / len(teacher)


def oracle_hard(labels, student, teacher):
    acc = 0.0
    for yrow, srow, trow in zip(labels, student, teacher):
        ps = _softmax_row(srow)
        pt = _softmax_row(trow)
        for y, qs, qt in zip(yrow, ps, pt):
            if y:
                acc += -math.log(qs) - math.log(qt)
    return acc / len(labels)


def oracle_feature(phi_t, phi_s):
    acc = 0.0
    for trow, srow in zip(phi_t, phi_s):
        acc += sum((a - b) ** 2 for a, b in zip(trow, srow))
    return acc / len(phi_t)


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


class TestOracleAgreement:
    def test_soft_loss_100_instances(self):
        gen = torch.Generator().manual_seed(100)
        for trial in range(100):
            n, k = int(_rand(gen, 1).abs() * 6) + 1, trial % 5 + 2
            tl, sl = _rand(gen, n, k) * 3, _rand(gen, n, k) * 3
            temperature = 0.5 + (trial % 7)
            got = float(soft_loss(tl, sl, temperature))
            want = oracle_soft(tl.tolist(), sl.tolist(), temperature)
            assert got == pytest.approx(want, rel=1e-6)

    def test_hard_loss_100_instances(self):
        gen = torch.Generator().manual_seed(200)
        for trial in range(100):
            n, k = trial % 6 + 1, trial % 4 + 2
            labels = torch.eye(k, dtype=torch.float64)[torch.randint(0, k, (n,), generator=gen)]
            sl, tl = _rand(gen, n, k) * 2, _rand(gen, n, k) * 2
            got = float(hard_loss(labels, sl, tl))
            want = oracle_hard(labels.tolist(), sl.tolist(), tl.tolist())
            assert got == pytest.approx(want, rel=1e-6)

    def test_feature_loss_100_instances(self):
        gen = torch.Generator().manual_seed(300)
        for trial in range(100):
            n, d = trial % 5 + 1, trial % 17 + 1
            pt, ps = _rand(gen, n, d), _rand(gen, n, d)
            got = float(feature_loss(pt, ps))
            want = oracle_feature(pt.tolist(), ps.tolist())
            assert got == pytest.approx(want, rel=1e-6)

    def test_total_loss_100_instances(self):
        gen = torch.Generator().manual_seed(400)
        for _ in range(100):
            vals = _rand(gen, 4).abs()
            alpha = float(torch.rand(1, generator=gen))
            beta, gamma = float(torch.rand(1, generator=gen)) * 3, float(torch.rand(1, generator=gen)) * 3
            cfg = DistillConfig(alpha=alpha, beta=beta, gamma=gamma, temperature=1.0)
            got = float(total_loss(*vals, cfg))
            want = alpha * float(vals[0]) + (1 - alpha) * float(vals[1]) + beta * float(vals[2]) + gamma * float(vals[3])
            assert got == pytest.approx(want, rel=1e-9)


class TestHandValues:
    def test_soft_hand_case(self):
        teacher = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
        student = torch.tensor([[0.0, math.log(3.0)]], dtype=torch.float64)
        want = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        got = float(soft_loss(teacher, student, 1.0))
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.14384, abs=1e-5)

    def test_hard_hand_case(self):
        labels = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        student = torch.tensor([[0.0, 0.0]], dtype=torch.float64)  # softmax (0.5, 0.5)
        teacher = torch.log(torch.tensor([[0.8, 0.2]], dtype=torch.float64))
        got = float(hard_loss(labels, student, teacher))
        assert got == pytest.approx(-math.log(0.5) - math.log(0.8), abs=1e-12)
        assert got == pytest.approx(0.91629, abs=1e-5)

    def test_feature_hand_case(self):
        pt = torch.tensor([[1.0, 0.0, 2.0]], dtype=torch.float64)
        ps = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
        assert float(feature_loss(pt, ps)) == pytest.approx(6.0, abs=1e-12)

    def test_total_hand_case(self):
        cfg = DistillConfig(alpha=0.5, beta=1.0, gamma=1.0, temperature=1.0)
        assert float(total_loss(2.0, 4.0, 6.0, 8.0, cfg)) == pytest.approx(17.0, abs=1e-12)


class TestAlgebraicProperties:
    def test_identical_logits_zero_soft(self):
        gen = torch.Generator().manual_seed(7)
        logits = _rand(gen, 5, 4)
        for temperature in (0.5, 1.0, 2.0, 10.0):
            assert float(soft_loss(logits, logits.clone(), temperature)) == pytest.approx(0.0, abs=1e-12)

    def test_identical_features_zero(self):
        gen = torch.Generator().manual_seed(8)
        phi = _rand(gen, 3, 9)
        assert float(feature_loss(phi, phi.clone())) == 0.0

    def test_saturated_predictions_vanishing_hard(self):
        labels = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        confident = torch.tensor([[25.0, 0.0], [0.0, 25.0]], dtype=torch.float64)
        assert float(hard_loss(labels, confident, confident)) <= 1e-8

    def test_hard_batch_permutation_invariant(self):
        gen = torch.Generator().manual_seed(9)
        labels = torch.eye(3, dtype=torch.float64)[torch.tensor([0, 2, 1, 0])]
        sl, tl = _rand(gen, 4, 3), _rand(gen, 4, 3)
        perm = torch.tensor([2, 0, 3, 1])
        a = float(hard_loss(labels, sl, tl))
        b = float(hard_loss(labels[perm], sl[perm], tl[perm]))
        assert a == pytest.approx(b, rel=1e-12)

    def test_feature_homogeneity(self):
        gen = torch.Generator().manual_seed(10)
        pt, ps = _rand(gen, 2, 5), _rand(gen, 2, 5)
        assert float(feature_loss(2 * pt, 2 * ps)) == pytest.approx(4 * float(feature_loss(pt, ps)), rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        n=st.integers(1, 6),
        k=st.integers(2, 5),
        temperature=st.floats(0.1, 50.0),
    )
    def test_non_negativity(self, seed, n, k, temperature):
        gen = torch.Generator().manual_seed(seed)
        tl, sl = _rand(gen, n, k) * 4, _rand(gen, n, k) * 4
        labels = torch.eye(k, dtype=torch.float64)[torch.randint(0, k, (n,), generator=gen)]
        assert float(soft_loss(tl, sl, temperature)) >= -1e-9
        assert float(hard_loss(labels, sl, tl)) >= 0.0
        assert float(feature_loss(tl, sl)) >= 0.0

    def test_temperature_limit_plateau(self):
        gen = torch.Generator().manual_seed(11)
        tl, sl = _rand(gen, 4, 4) * 2, _rand(gen, 4, 4) * 2
        hot = float(soft_loss(tl, sl, 1e3))
        hotter = float(soft_loss(tl, sl, 1e4))
        assert abs(hot - hotter) / abs(hotter) < 0.01

    def test_weight_collapse(self):
        cfg_soft = DistillConfig(alpha=1.0, beta=0.0, gamma=0.0, temperature=1.0)
        cfg_hard = DistillConfig(alpha=0.0, beta=0.0, gamma=0.0, temperature=1.0)
        assert float(total_loss(3.0, 5.0, 7.0, 9.0, cfg_soft)) == 3.0
        assert float(total_loss(3.0, 5.0, 7.0, 9.0, cfg_hard)) == 5.0


class TestValidation:
    def test_config_bounds(self):
        with pytest.raises(ConfigurationError):
            DistillConfig(alpha=1.5)
        with pytest.raises(ConfigurationError):
            DistillConfig(beta=-0.1)
        with pytest.raises(ConfigurationError):
            DistillConfig(temperature=0.0)
        with pytest.raises(ConfigurationError):
            DistillConfig(gamma=float("inf"))

    def test_logit_shape_checks(self):
        a, b = torch.zeros(2, 3), torch.zeros(2, 4)
        with pytest.raises(DimensionError):
            soft_loss(a, b, 1.0)
        with pytest.raises(DimensionError):
            soft_loss(torch.zeros(2, 1), torch.zeros(2, 1), 1.0)

    def test_non_finite_rejected(self):
        bad = torch.tensor([[float("nan"), 0.0]])
        good = torch.zeros(1, 2)
        with pytest.raises(ValidationError):
            soft_loss(bad, good, 1.0)
        with pytest.raises(ValidationError):
            feature_loss(bad, good)
        with pytest.raises(ValidationError):
            total_loss(float("nan"), 0.0, 0.0, 0.0, DistillConfig())

    def test_one_hot_enforced(self):
        logits = torch.zeros(2, 3)
        with pytest.raises(ValidationError):
            hard_loss(torch.full((2, 3), 0.5), logits, logits)
        with pytest.raises(ValidationError):
            hard_loss(torch.zeros(2, 3), logits, logits)

    def test_temperature_positive(self):
        with pytest.raises(ConfigurationError):
            soft_loss(torch.zeros(1, 2), torch.zeros(1, 2), -1.0)


class TestLogitDerivation:
    def test_pooling_matches_manual_mean(self):
        gen = torch.Generator().manual_seed(12)
        pred = torch.randn(3, 4, 5, 5, generator=gen)
        got = derive_logits(pred)
        assert torch.allclose(got, pred.mean(dim=3).mean(dim=2))
        assert got.shape == (3, 4)

    def test_readout_deterministic(self):
        a = make_readout(4, 7, seed=3)
        b = make_readout(4, 7, seed=3)
        c = make_readout(4, 7, seed=4)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)
        assert a.shape == (7, 4)

    def test_class_logits_identity_when_sizes_match(self):
        pred = torch.randn(2, 4, 3, 3)
        assert torch.equal(class_logits(pred, 4), derive_logits(pred))

    def test_class_logits_requires_readout_on_mismatch(self):
        pred = torch.randn(2, 4, 3, 3)
        with pytest.raises(ConfigurationError):
            class_logits(pred, 2)
        out = class_logits(pred, 2, make_readout(4, 2, seed=0))
        assert out.shape == (2, 2)
        with pytest.raises(DimensionError):
            class_logits(pred, 2, torch.zeros(3, 4))

    def test_feature_vector_concatenates_pooled_taps(self):
        taps = {"bottleneck": torch.ones(2, 8, 2, 2), "final_up": torch.zeros(2, 3, 4, 4)}
        phi = feature_vector(taps)
        assert phi.shape == (2, 11)
        assert torch.equal(phi[:, :8], torch.ones(2, 8))
        with pytest.raises(DimensionError):
            feature_vector({"bottleneck": torch.ones(2, 8, 2, 2)})


@pytest.fixture(scope="module")
def toy_pair():
    teacher = materialize(original_spec("toy"), seed=21)
    student = materialize(student_spec(original_spec("toy")), seed=22)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher, student


def _step_inputs(seed=0, n=2):
    gen = torch.Generator().manual_seed(seed)
    data = torch.randn(n, 4, 8, 8, generator=gen)
    eps = torch.randn(n, 4, 8, 8, generator=gen)
    cond = torch.randint(0, 2, (n,), generator=gen)
    t = torch.randint(0, 1000, (n,), generator=gen)
    batch = LatentBatch(data=data, cond_id=cond, timestep=t)
    context = torch.randn(n, 4, 64, generator=gen)
    return batch, eps, context


class TestDistillStep:
    def test_breakdown_and_gradients(self, toy_pair):
        teacher, student = toy_pair
        student.zero_grad(set_to_none=True)
        batch, eps, context = _step_inputs(1)
        scheduler = make_scheduler()
        cfg = DistillConfig()
        readout = make_readout(4, 2, seed=0)
        breakdown, grads = distill_step(
            teacher, student, batch, eps, cfg, scheduler, context, 2, readout
        )
        assert math.isfinite(breakdown.total)
        want_total = (
            cfg.alpha * breakdown.l_soft
            + (1 - cfg.alpha) * breakdown.l_hard
            + cfg.beta * breakdown.l_feature
            + cfg.gamma * breakdown.l_mse
        )
        assert breakdown.total == pytest.approx(want_total, rel=1e-5)
        assert grads
        assert any(g.abs().sum() > 0 for g in grads.values())
        student.zero_grad(set_to_none=True)

    def test_teacher_bitwise_frozen(self, toy_pair):
        teacher, student = toy_pair
        before = {n: p.clone() for n, p in teacher.named_parameters()}
        batch, eps, context = _step_inputs(2)
        distill_step(
            teacher, student, batch, eps, DistillConfig(), make_scheduler(), context, 2,
            make_readout(4, 2),
        )
        for n, p in teacher.named_parameters():
            assert torch.equal(p, before[n])
        student.zero_grad(set_to_none=True)

    def test_identical_network_null(self):
        spec = original_spec("toy")
        teacher = materialize(spec, seed=30)
        clone = materialize(spec, seed=31)
        clone.load_state_dict(teacher.state_dict())
        batch, eps, context = _step_inputs(3)
        breakdown = compute_losses(
            teacher, clone, batch, eps, DistillConfig(), make_scheduler(), context, 2,
            make_readout(4, 2),
        )
        assert breakdown.l_soft <= 1e-6
        assert breakdown.l_feature <= 1e-6

    def test_soft_only_gradient_decomposition(self, toy_pair):
        teacher, student = toy_pair
        batch, eps, context = _step_inputs(4)
        scheduler = make_scheduler()
        cfg = DistillConfig(alpha=1.0, beta=0.0, gamma=0.0, temperature=2.0)

        student.zero_grad(set_to_none=True)
        _, grads = distill_step(
            teacher, student, batch, eps, cfg, scheduler, context, 2, make_readout(4, 2)
        )

        # oracle: a hand-rolled forward computing only the soft term
        student.zero_grad(set_to_none=True)
        from slimdiff.core.scheduler import add_noise

        x_t = add_noise(scheduler, batch, eps, batch.timestep).data
        with torch.no_grad():
            t_pred = teacher(x_t, batch.timestep, context)
        s_pred = student(x_t, batch.timestep, context)
        loss = soft_loss(derive_logits(t_pred), derive_logits(s_pred), cfg.temperature)
        loss.backward()
        for name, p in student.named_parameters():
            want = torch.zeros_like(p) if p.grad is None else p.grad
            assert (grads[name] - want).abs().max() <= 1e-6, name
        student.zero_grad(set_to_none=True)

    def test_loss_scale_scales_gradients(self, toy_pair):
        teacher, student = toy_pair
        batch, eps, context = _step_inputs(5)
        scheduler = make_scheduler()
        readout = make_readout(4, 2)

        student.zero_grad(set_to_none=True)
        _, full = distill_step(
            teacher, student, batch, eps, DistillConfig(), scheduler, context, 2, readout
        )
        student.zero_grad(set_to_none=True)
        _, half = distill_step(
            teacher, student, batch, eps, DistillConfig(), scheduler, context, 2, readout,
            loss_scale=0.5,
        )
        student.zero_grad(set_to_none=True)
        for name in full:
            assert torch.allclose(half[name], 0.5 * full[name], atol=1e-8)

    def test_compute_losses_matches_step_and_leaves_no_grads(self, toy_pair):
        teacher, student = toy_pair
        batch, eps, context = _step_inputs(6)
        scheduler = make_scheduler()
        readout = make_readout(4, 2)
        student.zero_grad(set_to_none=True)
        quiet = compute_losses(
            teacher, student, batch, eps, DistillConfig(), scheduler, context, 2, readout
        )
        assert all(p.grad is None for p in student.parameters())
        loud, _ = distill_step(
            teacher, student, batch, eps, DistillConfig(), scheduler, context, 2, readout
        )
        student.zero_grad(set_to_none=True)
        assert quiet.total == pytest.approx(loud.total, rel=1e-6)

    def test_projection_used_when_widths_differ(self, toy_pair):
        teacher, student = toy_pair
        phi_s_dim = sum(
            (student.spec.channel_schedule[-1], student.spec.channel_schedule[0])
        )
        proj = TapProjection(phi_s_dim, phi_s_dim)
        batch, eps, context = _step_inputs(7)
        # widths match for the canonical pair, so the projection is simply
        # accepted and exercised through the identity-width path
        breakdown = compute_losses(
            teacher, student, batch, eps, DistillConfig(), make_scheduler(), context, 2,
            make_readout(4, 2), tap_projection=proj,
        )
        assert math.isfinite(breakdown.total)

    def test_eps_shape_mismatch_rejected(self, toy_pair):
        teacher, student = toy_pair
        batch, _, context = _step_inputs(8)
        with pytest.raises(DimensionError):
            compute_losses(
                teacher, student, batch, torch.zeros(2, 4, 4, 4), DistillConfig(),
                make_scheduler(), context, 2, make_readout(4, 2),
            )


class TestQuickGradientCheck:
    def test_central_differences_on_sampled_parameters(self):
        # small rehearsal of the acceptance-gate check: 24 parameters
        torch.manual_seed(0)
        student = materialize(student_spec(original_spec("toy")), seed=40).double()
        teacher = materialize(original_spec("toy"), seed=41).double()
        with torch.no_grad():
            # zeroed output head would null most gradients; give it life
            gen = torch.Generator().manual_seed(5)
            for p in student.conv_out.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)
        batch, eps, context = _step_inputs(9)
        batch = batch.to(torch.float64)
        eps, context = eps.double(), context.double()
        scheduler = make_scheduler()
        cfg = DistillConfig()
        readout = make_readout(4, 2).double()

        def loss_value():
            return compute_losses(
                teacher, student, batch, eps, cfg, scheduler, context, 2, readout
            ).total

        student.zero_grad(set_to_none=True)
        breakdown, grads = distill_step(
            teacher, student, batch, eps, cfg, scheduler, context, 2, readout
        )
        params = dict(student.named_parameters())
        rng = torch.Generator().manual_seed(77)
        names = sorted(params)
        checked = 0
        while checked < 24:
            name = names[int(torch.randint(0, len(names), (1,), generator=rng))]
            p = params[name]
            flat = p.detach().view(-1)
            idx = int(torch.randint(0, flat.numel(), (1,), generator=rng))
            h = 1e-5 * max(1.0, abs(float(flat[idx])))
            with torch.no_grad():
                flat[idx] += h
                up = loss_value()
                flat[idx] -= 2 * h
                down = loss_value()
                flat[idx] += h
            numeric = (up - down) / (2 * h)
            analytic = float(grads[name].view(-1)[idx])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / denom <= 1e-4, (name, idx, analytic, numeric)
            checked += 1
        student.zero_grad(set_to_none=True)
