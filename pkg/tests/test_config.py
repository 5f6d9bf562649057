from pathlib import Path

import pytest

import retrofit.config as config_module
from retrofit.config import CorpusConfig, IdoConfig, RunConfig, TrainConfig, get_config, reload_config
from retrofit.errors import UsageError


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.K == 10
    assert cfg.train.sigma0 == 100.0
    assert cfg.train.alpha == 0.1
    assert cfg.model.global_code_dim == 256
    assert cfg.model.part_code_dim == 32
    assert cfg.corpus.n_points == 2048
    assert cfg.corpus.tau == 0.05


def test_load_merges_tables(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[train]\nK = 4\nsampling = "uniform"\n\n[model]\npoint_widths = [8, 16]\n')
    cfg = RunConfig.load(path)
    assert cfg.train.K == 4
    assert cfg.train.sampling == "uniform"
    assert cfg.train.epochs == TrainConfig().epochs
    assert cfg.model.point_widths == (8, 16)


def test_load_without_path_gives_defaults():
    assert RunConfig.load(None) == RunConfig()


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\nx = 1\n",
        "[train]\nnot_a_key = 1\n",
        "train = 3\n",
        "[train]\nK = 0\n",
        '[train]\nsampling = "greedy"\n',
        "[ido]\nlr = -1.0\n",
        "[corpus]\nn_points = 7\n",
        "[train\n",
        '[train]\nepochs = "ten"\n',
        "[train]\nuse_projection = 1\n",
        '[train]\nlr = "fast"\n',
        "[model]\npoint_widths = 8\n",
        '[model]\npoint_widths = ["a"]\n',
        '[corpus]\nfamilies = "chair"\n',
        "[corpus]\npart_count = [6, 4]\n",
        "[corpus]\npart_count = [4]\n",
        '[corpus.dims]\n"table.width" = [2.0, 1.0]\n',
        "[bench]\ndb_sizes = [0]\n",
    ],
)
def test_bad_config_is_a_usage_error(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(UsageError):
        RunConfig.load(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(UsageError, match="not found"):
        RunConfig.load(tmp_path / "absent.toml")


def test_threads_resolution(monkeypatch):
    cfg = RunConfig()
    monkeypatch.setenv("RF_THREADS", "3")
    assert cfg.threads() == 3
    assert cfg.merged({"train": {"threads": 2}}).threads() == 2

    monkeypatch.setenv("RF_THREADS", "many")
    with pytest.raises(UsageError):
        cfg.threads()

    monkeypatch.delenv("RF_THREADS")
    assert cfg.threads() >= 1


def test_ido_training_details():
    ido = IdoConfig.training_details()
    assert ido.tol == 1e-5
    assert ido.max_iters == 5000


def test_to_dict_is_plain():
    data = RunConfig().to_dict()
    assert data["train"]["K"] == 10
    assert data["bench"]["arms"][0] == "static"


def test_global_config(tmp_path, monkeypatch):
    monkeypatch.setattr(config_module, "_config", None)
    monkeypatch.delenv("RF_CONFIG", raising=False)
    assert get_config() is get_config()

    path = tmp_path / "run.toml"
    path.write_text("[train]\nepochs = 3\n")
    monkeypatch.setenv("RF_CONFIG", str(path))
    assert reload_config().train.epochs == 3
    assert get_config().train.epochs == 3
    assert reload_config(tmp_path / "run.toml") is get_config()


def test_integer_for_float_field_is_converted(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[train]\nlr = 1\nsigma0 = 2\n")
    cfg = RunConfig.load(path)
    assert cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)
    assert cfg.train.sigma0 == 2.0


def test_wrong_type_names_table_and_key(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[train]\nepochs = "ten"\n')
    with pytest.raises(UsageError, match=r"\[train\]\.epochs"):
        RunConfig.load(path)


def test_corpus_part_count_and_dims(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[corpus]\npart_count = [4, 6]\n\n[corpus.dims]\n"table.width" = [1.5, 1.8]\n')
    cfg = RunConfig.load(path)
    assert cfg.corpus.part_count == (4, 6)
    assert cfg.corpus.dims == {"table.width": (1.5, 1.8)}
    assert CorpusConfig().part_count == ()
    assert CorpusConfig().dims == {}


BENCHMARK = Path(__file__).resolve().parent.parent / "configs" / "benchmark.toml"


def test_benchmark_profile_loads():
    cfg = RunConfig.load(BENCHMARK)
    assert cfg.bench.db_sizes == (50, 100, 200, 400, 800)
    assert cfg.bench.seeds == (0, 1, 2)
    assert cfg.bench.targets_per_source == 10
    assert cfg.corpus.n_sources == 100
    assert cfg.corpus.n_targets == 1000
    assert set(cfg.bench.arms) >= {"static", "ours", "ours_do"}
