import numpy as np
import pytest
import torch

from demixlab.decoder_simple import (
    SimpleDecoder,
    SimpleDecoderConfig,
    SimpleSystem,
    compute_batch_loss,
    latent_residual_swap,
    render_from_bundles,
    train_simple,
)
from demixlab.encoders import EncoderConfig
from demixlab.errors import ConfigError, ShapeError
from demixlab.objectives import LossConfig
from demixlab.trainutil import TrainConfig, clip_gradients

TINY = dict(conv_width=24, mlp_width=24, mlp_depth=2)


def tiny_system(**loss_kw) -> SimpleSystem:
    torch.manual_seed(0)
    return SimpleSystem(
        EncoderConfig(**TINY),
        SimpleDecoderConfig(hidden=24),
        LossConfig(**loss_kw),
    )


def test_decode_shape_and_determinism(torch_rng):
    dec = SimpleDecoder(SimpleDecoderConfig(hidden=16))
    z = torch.randn(64, generator=torch_rng)
    out = dec(z)
    assert out.shape == (128, 10)
    assert torch.equal(out, dec(z))


def test_decode_rejects_wrong_dim():
    dec = SimpleDecoder(SimpleDecoderConfig(hidden=16))
    with pytest.raises(ShapeError):
        dec(torch.zeros(32))


def test_default_train_config_matches_contract():
    cfg = TrainConfig()
    assert cfg.batch_size == 32
    assert cfg.lr == pytest.approx(4e-4)
    assert cfg.clip == 0.5


def test_render_modes(torch_rng):
    system = tiny_system()
    mel = torch.randn(128, 10, generator=torch_rng)
    q = torch.randn(128, 10, generator=torch_rng)
    bundles = system.encoder.encode_sources(mel, [q], phase="eval")
    single = render_from_bundles(system.decoder, bundles, "single")
    summed = render_from_bundles(system.decoder, bundles, "sum")
    assert torch.equal(single[0], summed)  # sum of one bundle
    three = system.encoder.encode_sources(mel, [q, q, q], phase="eval")
    assert render_from_bundles(system.decoder, three, "sum").shape == (128, 10)
    with pytest.raises(ConfigError):
        render_from_bundles(system.decoder, [], "sum")


# --- residual swap -------------------------------------------------------------


def test_residual_swap_identity():
    e_m = torch.randn(16)
    s = torch.randn(16)
    assert torch.equal(latent_residual_swap(e_m, s, s.clone()), e_m)


def test_residual_swap_zero():
    e_m = torch.randn(16)
    out = latent_residual_swap(e_m, e_m.clone(), torch.zeros(16))
    assert torch.equal(out, torch.zeros(16))


def test_residual_swap_hand_case():
    out = latent_residual_swap(
        torch.tensor([1.0, 2.0]), torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    )
    np.testing.assert_allclose(out.numpy(), [0.0, 3.0])


def test_residual_swap_inverse_bit_identical():
    # dyadic grids keep every add/subtract exact
    rng = np.random.default_rng(0)
    e_m = torch.tensor(rng.integers(-8192, 8192, 64) / 1024.0, dtype=torch.float32)
    s_i = torch.tensor(rng.integers(-8192, 8192, 64) / 1024.0, dtype=torch.float32)
    s_new = torch.tensor(rng.integers(-8192, 8192, 64) / 1024.0, dtype=torch.float32)
    fwd = latent_residual_swap(e_m, s_i, s_new)
    back = latent_residual_swap(fwd, s_new, s_i)
    assert torch.equal(back, e_m)


def test_residual_swap_dim_mismatch():
    with pytest.raises(ShapeError):
        latent_residual_swap(torch.zeros(4), torch.zeros(5), torch.zeros(4))


# --- gradient clipping -----------------------------------------------------------


def test_clip_invariant():
    lin = torch.nn.Linear(10, 10, bias=False)
    lin.weight.grad = torch.full_like(lin.weight, 1.0)
    pre = float(torch.linalg.vector_norm(lin.weight.grad))
    assert pre == pytest.approx(10.0)
    returned = clip_gradients(lin, 0.5)
    assert returned == pytest.approx(10.0, rel=1e-5)
    post = float(torch.linalg.vector_norm(lin.weight.grad))
    assert post <= 0.5 + 1e-6


# --- training loop ----------------------------------------------------------------


def test_batch_loss_and_ablation_paths(chord_dataset):
    rng = np.random.default_rng(0)
    trng = torch.Generator().manual_seed(0)
    idx = np.arange(6)
    reports = {}
    for name, kw in {
        "full": {},
        "no_bt": {"use_bt": False},
        "no_kld": {"use_kld": False},
        "no_sb": {"use_sb": False},
        "no_bce": {"use_bce": False},
    }.items():
        system = tiny_system(**kw)
        total, report = compute_batch_loss(
            system, chord_dataset, chord_dataset.examples("train"), idx, "train", rng, trng, "train"
        )
        assert np.isfinite(report.total)
        total.backward()
        reports[name] = report
    assert reports["no_bt"].bt == 0.0 and reports["full"].bt != 0.0
    assert reports["no_kld"].kld_tau == 0.0 and reports["full"].kld_tau != 0.0
    assert reports["no_bce"].bce == 0.0 and reports["full"].bce != 0.0


def test_train_simple_short_run(chord_dataset, tmp_path):
    system = tiny_system()
    cfg = TrainConfig(batch_size=8, max_steps=8, val_interval=4, patience=3, seed=0)
    ckpt = train_simple(chord_dataset, system, cfg, tmp_path)
    assert ckpt.exists() and (tmp_path / "metrics.jsonl").exists()
    loaded, meta = SimpleSystem.load(ckpt)
    assert meta["step"] == 8
    # parameters restore exactly
    for (k1, v1), (k2, v2) in zip(loaded.state_dict().items(), system.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)


def test_train_resume_continues_step_counter(chord_dataset, tmp_path):
    system = tiny_system()
    cfg = TrainConfig(batch_size=8, max_steps=6, val_interval=3, patience=10, seed=0)
    train_simple(chord_dataset, system, cfg, tmp_path)
    cfg2 = TrainConfig(batch_size=8, max_steps=10, val_interval=5, patience=10, seed=0)
    ckpt = train_simple(chord_dataset, system, cfg2, tmp_path, resume=True)
    import json

    meta = json.loads((ckpt.parent / "simple.ckpt.json").read_text())
    assert meta["step"] == 10


def test_prior_variants_construct(chord_dataset):
    rng = np.random.default_rng(0)
    trng = torch.Generator().manual_seed(0)
    idx = np.arange(4)
    for kind in ("fac", "rich"):
        system = tiny_system(prior_kind=kind, K=3)
        total, report = compute_batch_loss(
            system, chord_dataset, chord_dataset.examples("train"), idx, "train", rng, trng, "train"
        )
        assert report.pitch_prior_logprob != 0.0
        total.backward()
