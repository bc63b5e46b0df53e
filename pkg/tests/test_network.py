"""
Tests for network assembly, the training loop and checkpoint files.
"""

import numpy as np
import pytest

from s2wmamba.branches import bicubic_upsample
from s2wmamba.dataset import generate_scenes, wald_degrade
from s2wmamba.errors import FormatError, ShapeError, UsageError
from s2wmamba.models import AblationConfig, HistoryEntry, NetworkConfig, SceneSpec, TrainConfig
from s2wmamba.network import (
    AdamW,
    AwsParams,
    apply_ablation,
    attention_weighted_sum,
    build_model,
    count_parameters,
    fuse,
    history_table,
    l1_loss,
    load_checkpoint,
    mean_psnr,
    parameter_breakdown,
    read_checkpoint,
    save_checkpoint,
    train_toy,
)
from s2wmamba.tensor import Parameter, Tensor, check_gradients, mul, no_grad, sum_all

VARIANTS = [[], ["SpeO"], ["SpaO"], ["SeqB1"], ["SeqB2"], ["CRM"], ["HP"], ["AWS"], ["no_Gm"], ["no_Gc"], ["no_Ga"]]


def toy_triplets(bands=4, size=16, count=4, ratio=2, seed=5):
    scenes = generate_scenes(SceneSpec(bands=bands, size=size, count=count, seed=seed))
    return [wald_degrade(gt, ratio) for gt in scenes]


def randomize_gate_heads(model, rng, scale=0.3):
    for gate in (model.gate.gate1, model.gate.gate2):
        gate.head_w.data[...] = rng.uniform(-scale, scale, gate.head_w.shape)
        gate.head_b.data[...] = rng.uniform(-scale, scale, gate.head_b.shape)


@pytest.fixture(scope="module")
def wv3_trace():
    cfg = NetworkConfig(ratio=4, bands=8, width=32, seed=7)
    model = build_model(cfg)
    rng = np.random.default_rng(0)
    trace = []
    with no_grad():
        out = model.forward(Tensor(rng.random((1, 64, 64))), Tensor(rng.random((8, 16, 16))), trace=trace)
    return model, out, trace


class TestForward:
    """Tests for S2WMambaModel.forward."""

    def test_wv3_stage_shapes(self, wv3_trace):
        """Test the stage wise shapes of the 8 band, r = 4 network on a 64x64 input."""
        _, out, trace = wv3_trace
        assert out.shape == (8, 64, 64)
        assert trace == [
            ("Input PAN conv", (32, 64, 64)),
            ("Level-1 DWT2D", (128, 32, 32)),
            ("Level-2 DWT2D", (128, 16, 16)),
            ("FMamba (SpeBS-1)", (128, 16, 16)),
            ("IDWT2D (SpeBS-1)", (32, 32, 32)),
            ("FMamba (SpeBS-2)", (128, 32, 32)),
            ("IDWT2D (SpeBS-2)", (32, 64, 64)),
            ("Reduce to c", (8, 64, 64)),
            ("Level-3 DWT1D", (1, 64, 64)),
            ("IDWT1D (SpaBS-1)", (2, 64, 64)),
            ("Level-2 DWT1D", (2, 64, 64)),
            ("IDWT1D (SpaBS-2)", (4, 64, 64)),
            ("Level-1 DWT1D", (4, 64, 64)),
            ("IDWT1D (SpaBS-3)", (8, 64, 64)),
        ]

    def test_wv3_parameter_count(self, wv3_trace):
        """Test that the default network stays in the sub-million range."""
        model, _, _ = wv3_trace
        assert 400_000 <= count_parameters(model) <= 900_000
        breakdown = parameter_breakdown(model)
        assert sum(breakdown.values()) == count_parameters(model)
        assert {"spebs1", "spebs2", "spabs1", "spabs3", "msdg1", "msdg2"} <= set(breakdown)

    def test_zero_residual_is_upsampler(self, tiny_config, rng):
        """Test that zeroed output projections give exactly the bicubic upsample."""
        model = build_model(tiny_config)
        model.zero_residual_path()
        lrms = rng.random((4, 4, 4))
        out = fuse(model, rng.random((1, 8, 8)), lrms)
        with no_grad():
            up = bicubic_upsample(Tensor(lrms), 2).data
        assert np.array_equal(out, up)

    def test_untrained_near_upsampler(self, tiny_config, rng):
        """Test that the untrained network does not stray far from the upsampler."""
        model = build_model(tiny_config)
        lrms = rng.random((4, 4, 4))
        out = fuse(model, rng.random((1, 8, 8)), lrms)
        with no_grad():
            up = bicubic_upsample(Tensor(lrms), 2).data
        assert not np.array_equal(out, up)
        assert np.abs(out - up).mean() < 0.5

    def test_deterministic_build(self, tiny_config, rng):
        """Test that the same seed builds the same weights."""
        a, b = build_model(tiny_config), build_model(tiny_config)
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
        c = build_model(tiny_config, seed=4)
        assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))

    def test_shape_errors(self, tiny_config, rng):
        """Test rank, band count and ratio checks."""
        model = build_model(tiny_config)
        with pytest.raises(ShapeError):
            model.forward(Tensor(rng.random((2, 8, 8))), Tensor(rng.random((4, 4, 4))))
        with pytest.raises(ShapeError):
            model.forward(Tensor(rng.random((1, 8, 8))), Tensor(rng.random((8, 4, 4))))
        with pytest.raises(ShapeError):
            model.forward(Tensor(rng.random((1, 8, 8))), Tensor(rng.random((4, 2, 2))))

    def test_gradient(self, tiny_config, rng):
        """Test a slice of the full network parameters against finite differences."""
        model = build_model(tiny_config)
        randomize_gate_heads(model, rng)
        pan = Tensor(rng.uniform(0, 1, (1, 16, 16)))
        lrms = Tensor(rng.uniform(0, 1, (4, 8, 8)))
        weights = Tensor(rng.uniform(-1, 1, (4, 16, 16)))
        state = model.state()
        names = ["spe.out.weight", "spe.lrms_in.bias", "spabs2.orig_h.weight", "msdg1.head_w", "msdg.rho"]
        checked = [state[name] for name in names]
        report = check_gradients(lambda: sum_all(mul(model.forward(pan, lrms), weights)), checked, max_entries=3)
        assert report.passed, report.failures()

    @pytest.mark.slow
    def test_gradient_all_parameters(self, tiny_config, rng):
        """Test one sampled entry of every network parameter against finite differences."""
        model = build_model(tiny_config)
        randomize_gate_heads(model, rng)
        pan = Tensor(rng.uniform(0, 1, (1, 16, 16)))
        lrms = Tensor(rng.uniform(0, 1, (4, 8, 8)))
        weights = Tensor(rng.uniform(-1, 1, (4, 16, 16)))
        params = model.parameters()
        report = check_gradients(
            lambda: sum_all(mul(model.forward(pan, lrms), weights)), params, h=1e-4, tol=1e-3, max_entries=1, seed=2
        )
        assert len(report.entries) == len(params)
        assert report.passed, report.failures()


class TestAblations:
    """Tests for the ablation variants."""

    @pytest.mark.parametrize("names", VARIANTS, ids=lambda n: "+".join(n) or "Orig")
    def test_variant_runs(self, tiny_config, rng, names):
        """Test that every variant builds and produces the HRMS shape."""
        cfg = tiny_config.model_copy(update={"ablation": AblationConfig.from_names(names)})
        out = fuse(build_model(cfg), rng.random((1, 8, 8)), rng.random((4, 4, 4)))
        assert out.shape == (4, 8, 8)
        assert np.all(np.isfinite(out))

    @pytest.mark.slow
    @pytest.mark.parametrize("names", VARIANTS, ids=lambda n: "+".join(n) or "Orig")
    def test_variant_wv3_shape(self, wv3_config, names):
        """Test every variant on an 8 band, r = 4 network with a 64x64 PAN."""
        cfg = wv3_config.model_copy(update={"ablation": AblationConfig.from_names(names)})
        rng = np.random.default_rng(0)
        out = fuse(build_model(cfg), rng.random((1, 64, 64)), rng.random((8, 16, 16)))
        assert out.shape == (8, 64, 64)
        assert np.all(np.isfinite(out))

    def test_single_branch_parameters(self, tiny_config):
        """Test that SpeO drops the spatial branch and SpaO the spectral one."""
        speo = parameter_breakdown(build_model(tiny_config, ablation=AblationConfig(speo=True)))
        spao = parameter_breakdown(build_model(tiny_config, ablation=AblationConfig(spao=True)))
        assert not any(key.startswith("spabs") for key in speo)
        assert not any(key.startswith("spe") and not key.startswith("spabs") for key in spao)
        assert "head" in speo and "msdg" not in speo

    def test_replacements_drop_gate(self, tiny_config):
        """Test that HP and AWS have no dual gate parameters."""
        hp = build_model(tiny_config, ablation=AblationConfig(hp=True))
        aws = build_model(tiny_config, ablation=AblationConfig(aws=True))
        assert hp.gate is None and aws.gate is None
        assert "aws" in parameter_breakdown(aws)

    def test_attention_sum_equal_inputs(self, rng):
        """Test that the attention weighted sum of two equal maps is the map."""
        p = AwsParams(rng, 4)
        o = Tensor(rng.standard_normal((4, 3, 3)))
        assert np.allclose(attention_weighted_sum(o, o, p).data, o.data, atol=1e-14)

    def test_apply_ablation_carries_weights(self, tiny_config):
        """Test that shared parameters keep their values across variants."""
        model = build_model(tiny_config)
        model.state()["spe.pan_in.weight"].data[...] = 0.5
        variant = apply_ablation(model, AblationConfig(crm=True))
        assert variant.config.ablation.crm
        assert np.all(variant.state()["spe.pan_in.weight"].data == 0.5)

    def test_conflicting_names(self):
        """Test that two structural ablations are rejected."""
        with pytest.raises(UsageError):
            AblationConfig.from_names(["SpeO", "HP"])
        with pytest.raises(UsageError):
            AblationConfig.from_names(["HP", "no_Gm"])
        with pytest.raises(UsageError):
            AblationConfig.from_names(["nope"])


class TestTraining:
    """Tests for the loss, the optimizer and train_toy."""

    def test_l1_loss(self):
        """Test the mean absolute error of single samples and batches."""
        assert l1_loss(Tensor(np.zeros((2, 2, 2))), Tensor(np.ones((2, 2, 2)))).data == 1.0
        pred = [Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 2)))]
        gt = [Tensor(np.ones((1, 2, 2))), Tensor(np.full((1, 2, 2), 3.0))]
        assert l1_loss(pred, gt).data == 2.0
        with pytest.raises(ShapeError):
            l1_loss(pred, gt[:1])

    def test_learning_rate_schedule(self):
        """Test the step decay of the learning rate."""
        cfg = TrainConfig()
        assert cfg.lr_at(0) == 4e-4
        assert cfg.lr_at(99) == 4e-4
        assert cfg.lr_at(100) == pytest.approx(2.8e-4)
        assert cfg.lr_at(250) == pytest.approx(4e-4 * 0.49)

    def test_weight_decay_on_matrices_only(self):
        """Test that decoupled decay shrinks kernels but leaves vectors alone."""
        matrix = Parameter(np.ones((2, 2)), name="m")
        vector = Parameter(np.ones(2), name="v")
        for p in (matrix, vector):
            p.grad = np.zeros_like(p.data)
        AdamW([matrix, vector], TrainConfig(weight_decay=0.5)).step(lr=0.1)
        assert np.allclose(matrix.data, 0.95)
        assert np.all(vector.data == 1.0)

    def test_zero_steps(self, tiny_config):
        """Test that zero steps return an empty history and leave weights alone."""
        model = build_model(tiny_config)
        before = [p.data.copy() for p in model.parameters()]
        history = train_toy(model, toy_triplets(), TrainConfig(steps=0))
        assert history == []
        assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))

    def test_empty_training_set(self, tiny_config):
        """Test that an empty training set is a usage error."""
        with pytest.raises(UsageError):
            train_toy(build_model(tiny_config), [], TrainConfig(steps=1))

    def test_few_steps(self, tiny_config):
        """Test that a short run logs every step, evaluates and changes weights."""
        model = build_model(tiny_config)
        before = model.state()["spe.out.weight"].data.copy()
        triplets = toy_triplets(count=3)
        cfg = TrainConfig(steps=3, batch=2, patch=8, eval_every=2, learning_rate=1e-3)
        history = train_toy(model, triplets[:2], cfg, val_set=triplets[2:])
        assert [h.step for h in history] == [0, 1, 2]
        assert history[0].val_psnr is not None and history[1].val_psnr is None
        assert history[2].val_psnr is not None
        assert all(np.isfinite(h.loss) for h in history)
        assert not np.array_equal(before, model.state()["spe.out.weight"].data)

    def test_history_table(self):
        """Test the printed history layout."""
        table = history_table([HistoryEntry(step=0, loss=0.5, lr=4e-4), HistoryEntry(step=1, loss=0.25, lr=4e-4, val_psnr=30.0)])
        lines = table.splitlines()
        assert lines[0].split() == ["step", "loss", "lr", "val_psnr"]
        assert lines[1].split()[-1] == "-"
        assert lines[2].split()[-1] == "30.000"


class TestCheckpoints:
    """Tests for save_checkpoint / load_checkpoint."""

    def test_roundtrip(self, tiny_config, rng, tmp_path):
        """Test that values come back as their float32 rounding with the same config."""
        model = build_model(tiny_config, ablation=AblationConfig(no_gc=True))
        path = save_checkpoint(model, tmp_path / "net.s2wc")
        assert path.with_name("net.s2wc.json").exists()
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for name, p in model.state().items():
            assert np.array_equal(loaded.state()[name].data, p.data.astype(np.float32))

    def test_fuse_bit_identical(self, tiny_config, rng, tmp_path):
        """Test that two loads of one checkpoint fuse identically and match the source model."""
        model = build_model(tiny_config)
        path = save_checkpoint(model, tmp_path / "net.s2wc")
        pan, lrms = rng.random((1, 8, 8)), rng.random((4, 4, 4))
        first = fuse(load_checkpoint(path), pan, lrms)
        second = fuse(load_checkpoint(path), pan, lrms)
        assert np.array_equal(first, second)
        assert np.allclose(first, fuse(model, pan, lrms), atol=1e-5)

    def test_bad_magic(self, tiny_config, tmp_path):
        path = save_checkpoint(build_model(tiny_config), tmp_path / "net.s2wc")
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            read_checkpoint(path)

    def test_truncated(self, tiny_config, tmp_path):
        path = save_checkpoint(build_model(tiny_config), tmp_path / "net.s2wc")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_name_not_utf8(self, tiny_config, tmp_path):
        """Test that a corrupted parameter name is a format error."""
        path = save_checkpoint(build_model(tiny_config), tmp_path / "net.s2wc")
        raw = bytearray(path.read_bytes())
        raw[8] = 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_checkpoint(path)

    def test_huge_dims(self, tmp_path):
        """Test that dimensions past the element bound are rejected before reading values."""
        path = tmp_path / "big.s2wc"
        header = b"S2WC" + np.array([1, 1], dtype="<u2").tobytes() + b"w" + np.array([3], dtype="<u1").tobytes()
        path.write_bytes(header + np.full(3, 2**32 - 1, dtype="<u4").tobytes() + bytes(64))
        with pytest.raises(FormatError, match="implausible"):
            read_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "absent.s2wc")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "absent.s2wc")

    def test_config_mismatch(self, tiny_config, tmp_path):
        """Test that a checkpoint paired with another variant's config is rejected."""
        path = save_checkpoint(build_model(tiny_config), tmp_path / "net.s2wc")
        other = save_checkpoint(build_model(tiny_config, ablation=AblationConfig(hp=True)), tmp_path / "hp.s2wc")
        path.with_name("net.s2wc.json").write_bytes(other.with_name("hp.s2wc.json").read_bytes())
        with pytest.raises(FormatError):
            load_checkpoint(path)


@pytest.mark.slow
class TestAcceptance:
    """End to end training on synthetic scenes."""

    def test_beats_bicubic(self):
        """Test that 200 steps halve the loss and beat bicubic by 1 dB.

        Width 8 and learning rate 2e-3 replace the 32 and 4e-4 defaults to keep
        the CPU run short; the schedule, batch and optimizer are the defaults.
        """
        scenes = generate_scenes(SceneSpec(bands=8, size=32, count=72, seed=11))
        triplets = [wald_degrade(gt, 4) for gt in scenes]
        train, val = triplets[:64], triplets[64:]
        model = build_model(NetworkConfig(ratio=4, bands=8, width=8, d_state=4, seed=7))
        history = train_toy(model, train, TrainConfig(steps=200, batch=4, patch=16, learning_rate=2e-3))
        first = np.mean([h.loss for h in history[:5]])
        last = np.mean([h.loss for h in history[-10:]])
        assert last <= 0.5 * first
        assert mean_psnr(model, val, 4) >= mean_psnr(None, val, 4) + 1.0

    @pytest.mark.parametrize("names", VARIANTS[1:], ids=lambda n: "+".join(n))
    def test_variants_train(self, tiny_config, names):
        """Test that every variant trains 20 steps without diverging."""
        cfg = tiny_config.model_copy(update={"ablation": AblationConfig.from_names(names)})
        history = train_toy(build_model(cfg), toy_triplets(count=8), TrainConfig(steps=20, batch=2, patch=8))
        assert len(history) == 20
        assert all(np.isfinite(h.loss) for h in history)
