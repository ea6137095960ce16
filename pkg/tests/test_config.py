from pathlib import Path

import pytest
import yaml

from hamdesign.config import ConfigError, ExperimentConfig, TermConfig, default_terms

from conftest import small_planted_dict

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.name)
def test_shipped_configs_round_trip_byte_identical(path, tmp_path):
    cfg = ExperimentConfig.load(path)
    text = cfg.dumps()
    out = tmp_path / "again.yaml"
    cfg.save(out)
    again = ExperimentConfig.load(out)
    assert again == cfg
    assert again.dumps() == text


def test_defaults():
    d = small_planted_dict()
    del d["loss"], d["optimizer"]
    cfg = ExperimentConfig.from_dict(d)
    assert [t.kind for t in cfg.loss.terms] == ["overlap", "kl", "energy_variance", "regularization_l1"]
    assert [t.weight for t in default_terms()] == [1.0, 0.2, 1.0, 1e-3]
    assert cfg.loss.size_weights == "hilbert"
    assert cfg.optimizer.cgd(5).seed == 5


@pytest.mark.parametrize("patch, match", [
    ({"colour": "red"}, "unknown keys"),
    ({"model": {"nmae": "x"}}, r"config\.model: unknown keys"),
    ({"loss": {"terms": [{"kind": "overlap", "wieght": 1}]}}, r"terms\[0\]"),
    ({"optimizer": {"beta_scheme": "fletcher"}}, None),
])
def test_unknown_keys_and_bad_values_rejected(patch, match):
    d = small_planted_dict(**patch)
    with pytest.raises(ConfigError, match=match):
        cfg = ExperimentConfig.from_dict(d)
        cfg.optimizer.cgd(0)


@pytest.mark.parametrize("patch", [
    {"sizes": {"train": []}},
    {"sizes": {"train": [6, 6]}},
    {"sizes": {"train": [6], "test": [6]}},
    {"sizes": {"train": [0]}},
    {"reference": {"source": "oracle"}},
    {"reference": {"source": "planted", "support": []}},
    {"reference": {"source": "named"}},
    {"reference": {"source": "file", "files": {}}},
    {"loss": {"terms": []}},
    {"loss": {"terms": [{"kind": "overlap", "sizes": [10]}]}},
    {"loss": {"importance": {12: 1000}}},
    {"schema_version": 99},
])
def test_invariants_enforced(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(small_planted_dict(**patch))


def test_invalid_yaml_and_top_level():
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("a: [1, 2")
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load("/nonexistent/config.yaml")


def test_dump_is_plain_yaml():
    cfg = ExperimentConfig.from_dict(small_planted_dict())
    data = yaml.safe_load(cfg.dumps())
    assert data["reference"]["support"] == ["XX", "Z", "ZZ"]
    assert data["loss"]["terms"][1] == {**{f: None for f in TermConfig.__dataclass_fields__},
                                        "kind": "kl", "weight": 0.2, "raw": False}
