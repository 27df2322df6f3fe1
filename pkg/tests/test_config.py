"""Run configuration parsing, validation, and round-tripping."""
import pytest

import lemo.config as cf
import lemo.energies as en


def test_defaults_validate():
    cfg = cf.RunConfig()
    assert cfg.validate() is cfg
    w = cfg.energy_weights()
    assert isinstance(w, en.EnergyWeights)
    assert w.smooth == cfg.weight_smooth


def test_round_trip(tmp_path):
    cfg = cf.RunConfig(seed=9, train_clips=12, sigma_2d=0.5,
                       mask_kind="random-window", swap_stages=True,
                       weight_fric=2.5, out_dir="somewhere")
    path = tmp_path / "run.cfg"
    cf.save_config(path, cfg)
    assert cf.load_config(path) == cfg


def test_set_option_coercion():
    cfg = cf.RunConfig()
    cf.set_option(cfg, "seed", "17")
    cf.set_option(cfg, "weight_depth", "2.5")
    cf.set_option(cfg, "swap_stages", "true")
    cf.set_option(cfg, "mask_kind", "random-window")
    assert cfg.seed == 17 and cfg.weight_depth == 2.5
    assert cfg.swap_stages is True
    with pytest.raises(ValueError, match="boolean"):
        cf.set_option(cfg, "swap_stages", "maybe")
    with pytest.raises(ValueError, match="unknown config key"):
        cf.set_option(cfg, "weight_gravity", "1.0")


def test_load_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("# fine\nseed 3\nnot_a_key 1\n")
    with pytest.raises(ValueError, match=r"bad\.cfg:3"):
        cf.load_config(path)
    path.write_text("seed\n")
    with pytest.raises(ValueError, match="key value"):
        cf.load_config(path)


def test_validation_bounds():
    with pytest.raises(ValueError, match="positive"):
        cf.RunConfig(fps=0).validate()
    with pytest.raises(ValueError, match="non-negative"):
        cf.RunConfig(sigma_2d=-1.0).validate()
    with pytest.raises(ValueError, match="mask_kind"):
        cf.RunConfig(mask_kind="upper-body").validate()
    with pytest.raises(ValueError, match=">= 0"):
        cf.RunConfig(weight_coll=-5.0).validate()


def test_comments_and_blank_lines(tmp_path):
    path = tmp_path / "sparse.cfg"
    path.write_text("\n# header note\nseed 2\n\nfps 60\n")
    cfg = cf.load_config(path)
    assert cfg.seed == 2 and cfg.fps == 60
