"""Domain type invariants and config round-trip behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiseg.core import (
    Image,
    LabeledSample,
    MaskMap,
    PairingError,
    ProbMap,
    TrainConfig,
    config_replace,
    desk_config,
    load_config,
    save_config,
    validate_config,
)


class TestImage:
    def test_accepts_unit_range(self):
        img = Image(np.random.default_rng(0).uniform(0, 1, (4, 5, 2)))
        assert img.hw == (4, 5) and img.channels == 2

    def test_promotes_2d_to_single_channel(self):
        img = Image(np.zeros((3, 3)))
        assert img.channels == 1

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            Image(np.full((2, 2, 1), 1.5))

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            Image(np.full((2, 2, 1), np.nan))

    def test_pixels_are_frozen(self):
        img = Image(np.zeros((2, 2, 1)))
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1.0


class TestMaskMap:
    def test_valid(self):
        m = MaskMap(np.array([[0, 1], [2, 0]]), num_classes=3)
        assert m.hw == (2, 2)

    def test_value_at_or_above_num_classes_rejected(self):
        with pytest.raises(ValueError, match="mask values"):
            MaskMap(np.array([[0, 3]]), num_classes=3)

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="mask values"):
            MaskMap(np.array([[-1, 0]]), num_classes=2)

    def test_num_classes_below_two_rejected(self):
        with pytest.raises(ValueError, match="num_classes"):
            MaskMap(np.zeros((2, 2), dtype=int), num_classes=1)

    def test_empty_classes_are_fine(self):
        # a mask may omit classes entirely; L is carried explicitly
        MaskMap(np.zeros((4, 4), dtype=int), num_classes=4)


class TestProbMap:
    def test_row_stochastic_ok(self):
        p = np.full((2, 2, 4), 0.25)
        pm = ProbMap(p)
        assert pm.num_classes == 4

    def test_sum_violation_rejected(self):
        p = np.full((2, 2, 2), 0.6)
        with pytest.raises(ValueError, match="sums"):
            ProbMap(p)

    def test_tolerates_tiny_sum_error(self):
        p = np.full((1, 1, 2), 0.5)
        p[0, 0, 0] += 4e-6
        ProbMap(p)  # within 1e-5

    def test_negative_rejected(self):
        p = np.zeros((1, 1, 2))
        p[0, 0] = [-0.1, 1.1]
        with pytest.raises(ValueError, match="nonnegative"):
            ProbMap(p)

    def test_num_classes_mismatch_rejected(self):
        with pytest.raises(ValueError, match="num_classes"):
            ProbMap(np.full((1, 1, 3), 1 / 3), num_classes=4)


class TestPairing:
    def test_mismatched_shapes_rejected(self):
        img = Image(np.zeros((4, 4, 1)))
        mask = MaskMap(np.zeros((5, 4), dtype=int), num_classes=2)
        with pytest.raises(PairingError):
            LabeledSample(img, mask, id="x")

    def test_matched_ok(self):
        img = Image(np.zeros((4, 4, 1)))
        mask = MaskMap(np.zeros((4, 4), dtype=int), num_classes=2)
        LabeledSample(img, mask, id="x")


class TestValidateConfig:
    def test_reference_defaults_are_valid(self):
        cfg = TrainConfig(tau=0.90, mu=9, learning_rate=0.001)
        assert validate_config(cfg) == []

    def test_tau_out_of_range(self):
        violations = validate_config(config_replace(TrainConfig(), tau=1.5))
        assert len(violations) == 1 and "tau" in violations[0]

    def test_mu_zero(self):
        violations = validate_config(config_replace(TrainConfig(), mu=0))
        assert len(violations) == 1 and "mu" in violations[0]

    @pytest.mark.parametrize("field,value,token", [
        ("lambda_u", -1.0, "lambda_u"),
        ("learning_rate", 0.0, "learning_rate"),
        ("patience_epochs", 0, "patience_epochs"),
        ("num_classes", 1, "num_classes"),
        ("dice_epsilon", 0.0, "dice_epsilon"),
        ("boundary_width", 0, "boundary_width"),
        ("boundary_tolerance", 0, "boundary_tolerance"),
        ("rotation_range_deg", (20.0, -20.0), "rotation_range_deg"),
        ("blur_sigma_range", (-0.5, 1.0), "blur_sigma_range"),
        ("elastic_sigma", 0.0, "elastic_sigma"),
        ("resize_hw", (0, 96), "resize_hw"),
    ])
    def test_each_violation_names_its_field(self, field, value, token):
        violations = validate_config(config_replace(TrainConfig(), **{field: value}))
        assert any(token in v for v in violations)

    @given(tau=st.floats(min_value=0.0, max_value=1.0),
           mu=st.integers(min_value=1, max_value=64))
    @settings(max_examples=50, deadline=None)
    def test_in_range_values_never_flagged(self, tau, mu):
        cfg = config_replace(TrainConfig(), tau=tau, mu=mu)
        assert validate_config(cfg) == []


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = desk_config(tau=0.8, mu=7, seed=3, rotation_range_deg=(-5.0, 5.0))
        path = tmp_path / "run.toml"
        save_config(cfg, path)
        loaded, foreign = load_config(path)
        assert loaded == cfg
        assert foreign == {}

    def test_model_section_passes_through(self, tmp_path):
        path = tmp_path / "run.toml"
        save_config(TrainConfig(), path,
                    extra_sections={"model": {"depth": 3, "base_channels": 8}})
        _, foreign = load_config(path)
        assert foreign["model"] == {"depth": 3, "base_channels": 8}

    def test_unknown_key_is_an_error(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[pseudolabel]\ntau = 0.9\ntua = 0.8\n")
        with pytest.raises(ValueError, match="tua"):
            load_config(path)

    def test_unknown_section_is_an_error(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[pseudolable]\ntau = 0.9\n")
        with pytest.raises(ValueError, match="pseudolable"):
            load_config(path)

    def test_partial_file_keeps_defaults(self, tmp_path):
        path = tmp_path / "partial.toml"
        path.write_text("[pseudolabel]\ntau = 0.75\n")
        cfg, _ = load_config(path)
        assert cfg.tau == 0.75
        assert cfg.learning_rate == TrainConfig().learning_rate
