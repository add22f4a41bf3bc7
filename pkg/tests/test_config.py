import dataclasses

import pytest

from dstrack.config import EngineConfig, default_kappas, validate_config


def test_defaults_accepted():
    cfg = EngineConfig()
    assert validate_config(cfg) is cfg
    assert cfg.d == 256
    assert cfg.d_e == 256
    assert cfg.alpha == 0.3
    assert cfg.tau_dup == 0.4
    assert cfg.tau_age == 60
    assert cfg.n_encoder_stages == 2
    assert cfg.n_decoder_stages == 2
    assert cfg.ffn_hidden == 1024
    assert cfg.heatmap_kernel_width == 10.0
    assert cfg.keypoint_count == 15
    assert len(cfg.oks_kappas) == 15


def test_validate_is_idempotent():
    cfg = validate_config(EngineConfig())
    assert validate_config(cfg) is cfg


def test_alpha_out_of_range():
    with pytest.raises(ValueError, match="alpha out of range"):
        validate_config(EngineConfig(alpha=1.3))
    with pytest.raises(ValueError, match="alpha out of range"):
        validate_config(EngineConfig(alpha=-0.01))


def test_embedding_dim_must_be_positive():
    with pytest.raises(ValueError, match="embedding dim must be positive"):
        validate_config(EngineConfig(d=0))


def test_first_violation_wins():
    # both alpha and d invalid: the alpha message comes first
    with pytest.raises(ValueError, match="alpha out of range"):
        validate_config(EngineConfig(alpha=2.0, d=0))


def test_kappa_defaults_per_skeleton():
    assert len(default_kappas(17)) == 17
    assert default_kappas(17)[0] == 0.026
    assert len(default_kappas(15)) == 15
    assert default_kappas(15)[3] == 0.079  # left shoulder keeps its value
    assert default_kappas(9) == (0.07,) * 9


def test_kappa_validation():
    with pytest.raises(ValueError, match="kappa count"):
        validate_config(EngineConfig(keypoint_count=15, oks_kappas=(0.1, 0.2)))
    bad = (0.1,) * 14 + (0.0,)
    with pytest.raises(ValueError, match="strictly positive"):
        validate_config(EngineConfig(keypoint_count=15, oks_kappas=bad))


def test_mode_validation():
    with pytest.raises(ValueError, match="warp mode"):
        validate_config(EngineConfig(warp_mode="flow"))
    with pytest.raises(ValueError, match="edge update mode"):
        validate_config(EngineConfig(edge_update_mode="nope"))


def test_tau_and_dims():
    with pytest.raises(ValueError, match="tau_dup out of range"):
        validate_config(EngineConfig(tau_dup=1.5))
    with pytest.raises(ValueError, match="tau_age"):
        validate_config(EngineConfig(tau_age=-1))
    with pytest.raises(ValueError, match="divisible by 8"):
        validate_config(EngineConfig(crop_height=62))


def test_with_overrides_returns_new_config():
    cfg = EngineConfig()
    small = cfg.with_overrides(d=16, ffn_hidden=32)
    assert small.d == 16
    assert cfg.d == 256
    assert dataclasses.is_dataclass(small)


def test_d_e_follows_d_unless_set():
    assert EngineConfig(d=32).d_e == 32
    assert EngineConfig(d=32, d_e=8).d_e == 8
