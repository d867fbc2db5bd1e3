"""End-to-end command-line pipeline and exit-code contracts."""

import numpy as np
import pytest

from sfde import cli, data, retrieval, selftest


CFG = """
[model]
stage_channels = 4,4,8,8
blocks_per_stage = 1
input_size = 128
embed_dim = 8
heads = 2

[train]
steps = 8
batch_pairs = 4
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> ingest -> train -> embed (both views) once for the module."""
    base = tmp_path_factory.mktemp("cli")
    root = str(base / "data")
    manifest = str(base / "manifest.csv")
    cfg = str(base / "run.cfg")
    ckpt = str(base / "model.ckpt")
    q = str(base / "drone.bin")
    g = str(base / "sat.bin")
    open(cfg, "w").write(CFG)
    assert cli.main(["synth", "--root", root, "--classes", "4",
                     "--size", "32", "--seed", "1"]) == cli.EXIT_OK
    assert cli.main(["ingest", "--root", root, "--out", manifest]) == cli.EXIT_OK
    assert cli.main(["train", "--config", cfg, "--manifest", manifest,
                     "--out", ckpt]) == cli.EXIT_OK
    assert cli.main(["embed", "--ckpt", ckpt, "--manifest", manifest,
                     "--split", "train", "--view", "drone",
                     "--out", q]) == cli.EXIT_OK
    assert cli.main(["embed", "--ckpt", ckpt, "--manifest", manifest,
                     "--split", "train", "--view", "satellite",
                     "--out", g]) == cli.EXIT_OK
    return dict(base=base, root=root, manifest=manifest, cfg=cfg,
                ckpt=ckpt, query=q, gallery=g)


def test_selftest_passes_and_prints_table(capsys):
    assert cli.main(["selftest"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == len(selftest.PROPERTIES)
    assert "FAIL" not in out


def test_selftest_reports_injected_fault():
    lines = []
    failures = selftest.run(corrupt_fft_normalization=True, out=lines.append)
    assert failures == ["fft-round-trip"]
    assert any(line.startswith("FAIL") and "fft-round-trip" in line
               for line in lines)


def test_selftest_repeatable(capsys):
    cli.main(["selftest"])
    first = capsys.readouterr().out
    cli.main(["selftest"])
    second = capsys.readouterr().out
    assert first == second


def test_embed_store_counts(pipeline):
    queries = retrieval.load_embeddings(pipeline["query"])
    gallery = retrieval.load_embeddings(pipeline["gallery"])
    assert len(queries) == 8   # 4 classes x 2 drone
    assert len(gallery) == 4
    assert all(r.view == "drone" for r in queries)
    assert len(queries[0].vector) == 8 + 8 + 8


def test_eval_writes_reports(pipeline, capsys):
    out_dir = str(pipeline["base"] / "report")
    code = cli.main(["eval", "--query", pipeline["query"],
                     "--gallery", pipeline["gallery"],
                     "--k", "1,2", "--out", out_dir])
    assert code == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "R@1" in printed and "AP" in printed
    rankings = open(f"{out_dir}/retrieval_rankings.csv").read().splitlines()
    assert rankings[0] == "query_id,rank,gallery_id,score"
    assert len(rankings) == 1 + 8 * 4
    summary = open(f"{out_dir}/retrieval_summary.csv").read()
    assert "recall,1," in summary and "mean_ap,," in summary
    distances = open(f"{out_dir}/retrieval_distances.csv").read()
    assert "positive" in distances and "negative" in distances


def test_eval_k_exceeding_gallery_is_validation_error(pipeline):
    code = cli.main(["eval", "--query", pipeline["query"],
                     "--gallery", pipeline["gallery"],
                     "--k", "50", "--out", str(pipeline["base"] / "r2")])
    assert code == cli.EXIT_VALIDATION


def test_eval_dimension_mismatch_is_validation_error(pipeline, tmp_path):
    vec = np.zeros(4, dtype=np.float32)
    vec[0] = 1.0
    small = str(tmp_path / "small.bin")
    retrieval.save_embeddings(
        [retrieval.EmbeddingRecord("x", "drone", 0, vec)], small)
    code = cli.main(["eval", "--query", small,
                     "--gallery", pipeline["gallery"],
                     "--k", "1", "--out", str(tmp_path / "r")])
    assert code == cli.EXIT_VALIDATION


def test_corrupt_store_is_validation_error(pipeline, tmp_path):
    bad = str(tmp_path / "bad.bin")
    blob = bytearray(open(pipeline["query"], "rb").read())
    blob[:4] = b"XXXX"
    open(bad, "wb").write(bytes(blob))
    code = cli.main(["eval", "--query", bad, "--gallery", pipeline["gallery"],
                     "--k", "1", "--out", str(tmp_path / "r")])
    assert code == cli.EXIT_VALIDATION


def test_missing_file_is_io_error(tmp_path):
    code = cli.main(["eval", "--query", str(tmp_path / "none.bin"),
                     "--gallery", str(tmp_path / "none.bin"),
                     "--k", "1", "--out", str(tmp_path / "r")])
    assert code == cli.EXIT_IO


def test_ingest_unpaired_is_validation_error(tmp_path):
    vdir = tmp_path / "train" / "0" / "satellite"
    vdir.mkdir(parents=True)
    data.write_pnm(str(vdir / "a.pgm"), np.zeros((4, 4), dtype=np.uint8))
    code = cli.main(["ingest", "--root", str(tmp_path),
                     "--out", str(tmp_path / "m.csv")])
    assert code == cli.EXIT_VALIDATION


def test_bad_config_is_validation_error(pipeline, tmp_path):
    cfg = str(tmp_path / "bad.cfg")
    open(cfg, "w").write("mystery_knob = 1\n")
    code = cli.main(["train", "--config", cfg,
                     "--manifest", pipeline["manifest"],
                     "--out", str(tmp_path / "m.ckpt")])
    assert code == cli.EXIT_VALIDATION


def test_embed_empty_subset_is_validation_error(pipeline, tmp_path):
    code = cli.main(["embed", "--ckpt", pipeline["ckpt"],
                     "--manifest", pipeline["manifest"],
                     "--split", "nope", "--view", "both",
                     "--out", str(tmp_path / "e.bin")])
    assert code == cli.EXIT_VALIDATION
