import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repre.pipeline.config import ConfigError, TrainConfig

configs = st.builds(
    TrainConfig,
    depth=st.integers(2, 12), width=st.sampled_from([16, 32, 64]), taps=st.integers(1, 4),
    reconstruction=st.booleans(), decoder_width=st.one_of(st.none(), st.integers(1, 64)),
    tau=st.floats(0.01, 1.0), momentum=st.floats(0.0, 1.0), proj_hidden=st.one_of(st.none(), st.integers(1, 99)),
    norm_mean=st.tuples(*[st.floats(0, 1)] * 3), out_dir=st.sampled_from(["runs/a", "x y/z"]),
)


@settings(max_examples=60, deadline=None)
@given(configs)
def test_text_and_dict_round_trip(cfg):
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_file_round_trip(tmp_path):
    cfg = TrainConfig(steps=7, fusion_operator="transformer")
    cfg.save(tmp_path / "c.cfg")
    assert TrainConfig.load(tmp_path / "c.cfg") == cfg


def test_comments_blank_lines_and_partial_files():
    cfg = TrainConfig.from_text("# a comment\n\nsteps = 12  # trailing\nreconstruction = no\n")
    assert cfg.steps == 12 and cfg.reconstruction is False
    assert cfg.width == TrainConfig().width


@pytest.mark.parametrize("text,match", [
    ("stepz = 3", "unknown config key"),
    ("steps 3", "expected 'key = value'"),
    ("steps = three", "bad value for steps"),
    ("reconstruction = maybe", "bad value for reconstruction"),
    ("norm_std = 0.1, 0.2", "bad value for norm_std"),
])
def test_bad_text_reports_line(text, match):
    with pytest.raises(ConfigError, match=match):
        TrainConfig.from_text("seed = 1\n" + text)


def test_unknown_dict_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainConfig.from_dict({"seed": 1, "bogus": 2})


@pytest.mark.parametrize("changes", [
    dict(taps=8), dict(image_size=30), dict(contrastive_mode="simclr"), dict(momentum=1.5),
    dict(queue_size=0, batch_size=1), dict(crop_scale_min=0.0), dict(norm_std=(0.1, 0.0, 0.1)),
    dict(fusion_layers=3), dict(steps=-1), dict(hue=0.7), dict(grayscale_prob=1.5), dict(jitter_prob=-0.1),
])
def test_validation_rejects(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes).validate()


def test_defaults_validate():
    TrainConfig().validate()
    # an invalid decoder setting is ignored when reconstruction is off
    TrainConfig(reconstruction=False, fusion_layers=3).validate()
