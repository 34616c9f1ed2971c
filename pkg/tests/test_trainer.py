import copy
import json

import numpy as np
import pytest

from resvit.checkpoint import Checkpoint
from resvit.data import TaskConfig, leave_one_out_tasks
from resvit.errors import ConfigError, NumericError
from resvit.generator import Generator, untie_weights
from resvit.gradcheck import toy_model_config
from resvit.nn import Module
from resvit.tensor import Parameter, Tensor, default_dtype
from resvit.trainer import (LOG_HEADER, VARIANTS, Adam, LossWeights, TrainConfig, Trainer,
                            TrainPlan, adversarial_losses, generator_from_checkpoint, lr_at_epoch,
                            pixel_loss, reconstruction_loss, sample_task, synthesize,
                            total_generator_loss, window_lr)

from conftest import small_train_config

MODS = ("T1", "T2", "PD")


class Constant(Module):
    """Critic stand-in returning a fixed score map."""

    def __init__(self, value):
        self.value = value

    def forward(self, x):
        return Tensor(np.full((x.shape[0], 1, 2, 2), self.value)) + x.sum() * 0.0


class TestLosses:
    def test_pixel_identity(self, rng):
        m = Tensor(rng.standard_normal((1, 2, 4, 4)))
        assert pixel_loss(m, m, (1, 0)).item() == 0.0

    def test_pixel_offset(self, rng):
        m = rng.standard_normal((2, 2, 4, 4))
        y = m.copy()
        y[:, 1] += 0.5
        y[:, 0] += 7.0  # source deviation ignored
        assert pixel_loss(Tensor(y), Tensor(m), (1, 0)).item() == pytest.approx(0.5)

    def test_reconstruction_offsets(self, rng):
        m = rng.standard_normal((1, 3, 4, 4))
        y = m + np.array([0.1, 0.3, 9.9]).reshape(1, 3, 1, 1)
        assert reconstruction_loss(Tensor(y), Tensor(m), (1, 1, 0)).item() == pytest.approx(0.4)

    def test_reconstruction_perfect(self, rng):
        m = Tensor(rng.standard_normal((1, 3, 4, 4)))
        assert reconstruction_loss(m, m, (0, 1, 1)).item() == 0.0

    @pytest.mark.parametrize("acq,syn,l_d,l_g", [(1.0, 0.0, 0.0, 1.0), (0.5, 0.5, 0.5, 0.25),
                                                 (1.0, 1.0, 1.0, 0.0)])
    def test_adversarial_constants(self, acq, syn, l_d, l_g):
        x = Tensor(np.zeros((1, 4, 8, 8)))

        class Split(Module):
            def forward(self, inp):
                v = syn if inp.data.flat[0] == 1 else acq
                return Tensor(np.full((1, 1, 2, 2), v)) + inp.sum() * 0.0

        d_loss, g_loss = adversarial_losses(Split(), Tensor(np.ones((1, 4, 8, 8))), x)
        assert d_loss.item() == pytest.approx(l_d)
        assert g_loss.item() == pytest.approx(l_g)

    def test_total(self):
        assert total_generator_loss(0.0, 0.0, 0.0, LossWeights()) == 0.0
        assert total_generator_loss(0.5, 0.2, 0.25, LossWeights()) == pytest.approx(70.25)

    def test_linearity(self):
        parts = (0.37, 0.11, 0.52)
        base = total_generator_loss(*parts, LossWeights())
        doubled = total_generator_loss(*parts, LossWeights(pix=200.0))
        assert doubled - base == pytest.approx(100.0 * parts[0], rel=1e-12)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(rec=-1.0)

    def test_critic_frozen_during_generator_term(self, rng):
        from resvit.discriminator import PatchDiscriminator

        d = PatchDiscriminator(4, rng, base=2)
        x = Tensor(rng.standard_normal((1, 4, 32, 32)), requires_grad=True)
        _, g = adversarial_losses(d, x, Tensor(np.zeros((1, 4, 32, 32))))
        g.backward()
        assert x.grad is not None
        assert all(p.grad is None for p in d.parameters())
        assert all(p.requires_grad for p in d.parameters())


class TestAdam:
    @pytest.mark.parametrize("g", [3.0, -0.02])
    def test_first_step_sign(self, g):
        p = Parameter(np.array([1.0]))
        p.grad = np.array([g])
        Adam([("p", p)]).step(0.1)
        assert p.data[0] == pytest.approx(1.0 - 0.1 * np.sign(g), abs=1e-6)

    def test_zero_gradient(self):
        p = Parameter(np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        Adam([("p", p)]).step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_missing_gradient_skipped(self):
        p = Parameter(np.ones(2))
        opt = Adam([("p", p)])
        opt.step(0.1)
        assert opt.state[id(p)]["t"] == 0

    def test_nan_aborts_whole_step(self):
        p, q = Parameter(np.ones(2)), Parameter(np.ones(2))
        p.grad = np.ones(2)
        q.grad = np.array([np.nan, 1.0])
        with pytest.raises(NumericError):
            Adam([("p", p), ("q", q)]).step(0.1)
        np.testing.assert_array_equal(p.data, 1.0)

    def test_shared_parameter_one_entry(self):
        p = Parameter(np.ones(2))
        opt = Adam([("a", p), ("b", p)])
        assert len(opt.state) == 1 and list(opt.params) == ["a"]

    def test_state_roundtrip(self):
        p = Parameter(np.ones(3))
        opt = Adam([("w", p)])
        p.grad = np.array([1.0, 2.0, 3.0])
        opt.step(0.01)
        state = opt.state_tensors("opt.")
        other = Adam([("w", Parameter(np.ones(3)))])
        other.load_state_tensors(state, "opt.")
        s = next(iter(other.state.values()))
        assert s["t"] == 1
        np.testing.assert_allclose(s["m"], 0.5 * p.grad)

    def test_tied_update_equals_summed_gradients(self):
        with default_dtype(np.float64):
            tied = Generator(toy_model_config(transformer_positions=(1, 2)),
                             np.random.default_rng(11))
        twin = copy.deepcopy(tied)
        untie_weights(twin)
        x = np.random.default_rng(5).standard_normal((1, 2, 64, 64))
        with default_dtype(np.float64):
            for model in (tied, twin):
                model(Tensor(x)).sum().backward()
        opt = Adam(tied.named_parameters())
        before = {n: p.data.copy() for n, p in tied.art[0].transformer.vit.encoder.named_parameters()}
        opt.step(1e-3)
        first = dict(twin.art[0].transformer.vit.encoder.named_parameters())
        second = dict(twin.art[1].transformer.vit.encoder.named_parameters())
        for name, p in tied.art[0].transformer.vit.encoder.named_parameters():
            ref = Parameter(before[name].copy())
            ref.grad = first[name].grad + second[name].grad
            Adam([("r", ref)]).step(1e-3)
            delta = ref.data - before[name]
            denom = max(np.abs(delta).max(), 1e-30)
            assert np.abs((p.data - before[name]) - delta).max() / denom < 1e-6


class TestSchedule:
    def test_constant_region(self):
        assert lr_at_epoch(10, TrainPlan()) == 2e-4

    def test_decay_point(self):
        assert lr_at_epoch(37, TrainPlan()) == pytest.approx(1.04e-4)

    def test_window_end(self):
        assert window_lr(50, 50, 2e-4) == 0.0

    def test_phase_two_rate(self):
        plan = TrainPlan()
        assert lr_at_epoch(50, plan) == 1e-3
        assert lr_at_epoch(99, plan) == pytest.approx(1e-3 * 1 / 25)

    @pytest.mark.parametrize("p1,p2", [(50, 50), (8, 8), (3, 1), (0, 4)])
    def test_nonincreasing_within_phase(self, p1, p2):
        plan = TrainPlan(phase1_epochs=p1, phase2_epochs=p2)
        for lo, hi in ((0, p1), (p1, p1 + p2)):
            rates = [lr_at_epoch(e, plan) for e in range(lo, hi)]
            assert all(b <= a for a, b in zip(rates, rates[1:]))
            assert all(r >= 0 for r in rates)

    @pytest.mark.parametrize("e", [-1, 100])
    def test_out_of_range(self, e):
        with pytest.raises(ConfigError):
            lr_at_epoch(e, TrainPlan())


class TestTaskSampling:
    def test_single_task(self):
        task = leave_one_out_tasks(MODS)[0]
        rng = np.random.default_rng(0)
        assert all(sample_task(rng, [task]) is task for _ in range(20))

    def test_uniform_frequencies(self):
        tasks = leave_one_out_tasks(MODS)
        rng = np.random.default_rng(0)
        counts = {t.name: 0 for t in tasks}
        for _ in range(30000):
            counts[sample_task(rng, tasks).name] += 1
        for c in counts.values():
            assert abs(c / 30000 - 1 / 3) < 0.01

    def test_default_list(self):
        assert {t.availability for t in leave_one_out_tasks(MODS)} == {(1, 1, 0), (1, 0, 1),
                                                                       (0, 1, 1)}

    def test_empty(self):
        with pytest.raises(ConfigError):
            sample_task(np.random.default_rng(0), [])


class TestTrainConfig:
    def test_errors_enumerated(self):
        with pytest.raises(ConfigError) as info:
            TrainConfig.from_dict({"bogus": 1, "other": 2, "base_channels": "wide"})
        msg = str(info.value)
        assert "bogus" in msg and "other" in msg and "base_channels" in msg

    def test_bad_tasks_type(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"tasks": "T1+T2->PD"})

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({}, variant="no_everything")

    def test_loss_keys(self):
        cfg = TrainConfig.from_dict({"lambda_pix": 10, "lambda_adv": 0.5})
        assert (cfg.weights.pix, cfg.weights.rec, cfg.weights.adv) == (10.0, 100.0, 0.5)

    def test_task_specific_zeroes_rec(self):
        cfg = TrainConfig.from_dict({"unified": False, "tasks": ["T1+T2->PD"]})
        assert cfg.weights.rec == 0.0

    def test_no_adv_variant(self):
        cfg = TrainConfig.from_dict({}, variant="no_adv")
        assert cfg.plan.no_adv and cfg.weights.adv == 0.0

    def test_untied_variant(self):
        assert TrainConfig.from_dict({}, variant="untied").model.tie_weights is False

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_every_variant_resolves(self, name):
        assert TrainConfig.from_dict({}, variant=name).variant == name

    def test_dump_load_roundtrip(self, tmp_path):
        cfg = TrainConfig.from_dict(small_train_config(), variant="A1_only")
        cfg.dump(tmp_path / "c.json")
        again = TrainConfig.load(tmp_path / "c.json")
        assert again.to_dict() == cfg.to_dict()
        assert again.model.transformer_positions == (1,)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            TrainConfig.load(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("[1, 2]")
        with pytest.raises(ConfigError):
            TrainConfig.load(tmp_path / "bad.json")


def _trainer(ds, tmp_path=None, variant=None, **over):
    cfg = TrainConfig.from_dict(small_train_config(**over), variant=variant)
    log = None if tmp_path is None else tmp_path / "log.csv"
    return Trainer(cfg, ds, log_path=log)


@pytest.fixture(scope="module")
def trained(small_phantom, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    tr = _trainer(small_phantom, tmp)
    ckpts = list(tr.run())
    return tr, ckpts, tmp / "log.csv"


class TestTraining:
    def test_checkpoint_stream(self, trained):
        _, ckpts, _ = trained
        assert [(c.epoch, c.phase) for c in ckpts] == [(1, 1), (2, 2)]

    def test_phase_one_has_no_transformers(self, trained):
        _, ckpts, _ = trained
        assert not any(".transformer." in n for n in ckpts[0].names())

    def test_phase_two_has_one_tied_copy(self, trained):
        tr, ckpts, _ = trained
        names = [n for n in ckpts[1].names() if n.startswith("gen.")]
        assert any(n.startswith("gen.art.0.transformer.vit.encoder.") for n in names)
        assert not any(n.startswith("gen.art.2.transformer.vit.encoder.") for n in names)
        assert any(n.startswith("gen.art.2.transformer.vit.embed.") for n in names)

    def test_log_format(self, trained):
        tr, _, log = trained
        lines = log.read_text().splitlines()
        assert lines[0].split(",") == LOG_HEADER
        assert len(lines) == 1 + len(tr.history)
        names = {t.name for t in tr.tasks}
        assert all(line.split(",")[2] in names for line in lines[1:])

    def test_phase_rates(self, trained):
        tr, _, _ = trained
        assert {h.lr for h in tr.history if h.epoch == 1} == {2e-4}
        assert {h.lr for h in tr.history if h.epoch == 2} == {1e-3}

    def test_finite_losses(self, trained):
        tr, _, _ = trained
        assert all(np.isfinite([h.pix, h.rec, h.g_adv, h.d]).all() for h in tr.history)

    def test_checkpoint_reloads(self, trained, small_phantom):
        tr, ckpts, _ = trained
        gen = generator_from_checkpoint(ckpts[-1], tr.config.model)
        images, _ = small_phantom.arrays("test")
        task = tr.tasks[0]
        a = synthesize(gen, images, task)
        b = synthesize(tr.generator.eval(), images, task)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_fingerprint_mismatch(self, trained):
        tr, ckpts, _ = trained
        other = TrainConfig.from_dict(small_train_config(base_channels=8)).model
        with pytest.raises(ConfigError) as info:
            generator_from_checkpoint(ckpts[-1], other)
        assert f"{ckpts[-1].fingerprint:016x}" in str(info.value)

    def test_deterministic_replay(self, trained, small_phantom):
        tr, _, _ = trained
        again = _trainer(small_phantom)
        list(again.run())
        assert [h.row() for h in again.history] == [h.row() for h in tr.history]


class TestTrainStep:
    def test_alternation(self, small_phantom):
        tr = _trainer(small_phantom)
        gen_params = tr.generator.parameters()
        disc_params = tr.discriminator.parameters()
        snap = {}
        orig_d, orig_g = tr.opt_d.step, tr.opt_g.step

        def d_step(lr):
            g_before = [p.data.copy() for p in gen_params]
            orig_d(lr)
            assert all(np.array_equal(a, p.data) for a, p in zip(g_before, gen_params))
            snap["disc"] = [p.data.copy() for p in disc_params]

        def g_step(lr):
            orig_g(lr)
            assert all(np.array_equal(a, p.data) for a, p in zip(snap["disc"], disc_params))
            snap["gen_moved"] = True

        tr.opt_d.step, tr.opt_g.step = d_step, g_step
        tr.train_step(tr.images[:2], tr.tasks[0], 1e-3)
        assert snap["gen_moved"]

    def test_no_adv_skips_critic(self, small_phantom):
        tr = _trainer(small_phantom, variant="no_adv")
        assert tr.discriminator is None and tr.opt_d is None
        _, _, g_adv, d = tr.train_step(tr.images[:2], tr.tasks[0], 1e-3)
        assert g_adv == 0.0 and d == 0.0
        ck = tr.checkpoint(1)
        assert not any(n.startswith(("disc.", "opt.disc.")) for n in ck.names())

    def test_nan_guard(self, small_phantom):
        tr = _trainer(small_phantom)
        tr.generator.decoder.out.bias.data[...] = np.nan
        with pytest.raises(NumericError):
            tr.train_step(tr.images[:1], tr.tasks[0], 1e-3)

    def test_phase_two_degenerates_without_transformers(self, small_phantom):
        tr = _trainer(small_phantom, variant="no_transformers")
        ckpts = list(tr.run())
        assert ckpts[-1].phase == 2
        assert not any(".transformer." in n for n in ckpts[-1].names())

    def test_transformer_import(self, trained, small_phantom):
        _, ckpts, _ = trained
        cfg = TrainConfig.from_dict(small_train_config())
        tr = Trainer(cfg, small_phantom, transformer_init=ckpts[-1])
        tr._insert()
        state = tr.generator.state_dict("gen.")
        for name, value in ckpts[-1].tensors.items():
            if name.startswith("gen.") and ".transformer." in name:
                np.testing.assert_array_equal(state[name], value)

    def test_image_size_mismatch(self, small_phantom):
        with pytest.raises(ConfigError):
            _trainer(small_phantom, image_size=96)

    def test_explicit_task_list(self, small_phantom):
        tr = _trainer(small_phantom, tasks=["T1->T2+PD"])
        assert [t.name for t in tr.tasks] == ["T1->T2+PD"]


def test_checkpoint_export_import_json_safe(trained):
    tr, _, _ = trained
    json.dumps(tr.config.to_dict())
    assert isinstance(tr.checkpoint(2), Checkpoint)
