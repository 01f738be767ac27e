import pytest

from segmatch.config import config_from_mapping, dump_config, load_config, parse_overrides
from segmatch.exceptions import ConfigError
from segmatch.schemas import ClassifierKind, FeatureSet, PipelineConfig, PipelineMode


def test_defaults():
    config = load_config()
    assert config.mode is PipelineMode.LOOP_CLOSURE
    assert config.cylinder_radius == 60.0
    assert config.voxel_leaf == 0.1
    assert config.knn == 200
    assert config.min_cluster_size == 4
    assert config.effective_forest_threshold == pytest.approx(0.72)
    assert config.inner_radius == pytest.approx(57.0)


def test_file_with_comments(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "# synthetic run\n"
        "classifier = l2\n"
        "knn = 50  # fewer neighbours\n"
        "\n"
        "forest_feature_set = eigen\n"
        "accumulate_scans = false\n"
    )
    config = load_config(path)
    assert config.classifier is ClassifierKind.L2
    assert config.knn == 50
    assert config.forest_feature_set is FeatureSet.EIGEN
    assert config.accumulate_scans is False
    assert config.effective_forest_threshold == pytest.approx(0.81)


def test_overrides_win(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("knn = 50\n")
    assert load_config(path, {"knn": "7"}).knn == 7


def test_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_mapping({"bogus": "1"})


def test_key_without_value(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("knn\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_invalid_value():
    with pytest.raises(ConfigError):
        config_from_mapping({"knn": "many"})
    with pytest.raises(ConfigError):
        config_from_mapping({"keep_ratio": "1.5"})


def test_boundary_must_be_inside_cylinder():
    with pytest.raises(ConfigError, match="boundary_thickness"):
        config_from_mapping({"cylinder_radius": "3", "boundary_thickness": "3"})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.conf")


def test_dump_round_trip(tmp_path):
    original = PipelineConfig(classifier="l2", knn=33, l2_threshold=0.0031, forest_threshold=0.65, mode="localization")
    path = tmp_path / "dumped.conf"
    path.write_text(dump_config(original))
    assert load_config(path) == original


def test_dump_leaves_unset_values_commented():
    assert "# forest_threshold =" in dump_config(PipelineConfig())


def test_parse_overrides():
    assert parse_overrides(["knn=5", " mode = localization "]) == {"knn": "5", "mode": "localization"}
    assert parse_overrides(None) == {}
    with pytest.raises(ConfigError):
        parse_overrides(["knn"])
    with pytest.raises(ConfigError):
        parse_overrides(["=5"])
