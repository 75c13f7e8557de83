import numpy as np
import pytest

from coverclip.data import load_manifest
from coverclip.encoders import ModelConfig
from coverclip.synthetic import generate_corpus, generate_eval_set, load_generator_config, read_jsonl


@pytest.fixture
def tiny_cfg():
    """Smallest config that still exercises every code path."""
    return ModelConfig(vocab_size=20, d_model=8, d_proj=4, image_layers=1, text_layers=1, heads=2,
                       patch_size=8, image_resolution=16, max_text_len=5, head_layers=1, head_heads=2,
                       mlp_ratio=2)


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab_size=64, d_model=16, d_proj=8, image_layers=1, text_layers=1, heads=2,
                       patch_size=8, image_resolution=32, max_text_len=8, head_layers=1, head_heads=2)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """400 training covers, 120 held-out covers and a 20-query eval set at 32 px."""
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_corpus(400, 6, 0.4, 3, out, resolution=32, n_heldout=120)
    gen = load_generator_config(out)
    held = [r for r in read_jsonl(manifest) if r["split"] == "heldout"]
    generate_eval_set(held, gen["topics"], 20, 3, out / "eval.jsonl")
    return {
        "dir": out,
        "manifest": manifest,
        "eval": out / "eval.jsonl",
        "config": gen,
        "train": load_manifest(manifest, split="train", resolution=32),
        "heldout": load_manifest(manifest, split="heldout", resolution=32),
        "eval_samples": load_manifest(out / "eval.jsonl", resolution=32),
    }


@pytest.fixture
def images():
    return lambda b, res, seed=0: np.random.default_rng(seed).random((b, res, res, 3))


# -- acceptance reporting -------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    entry = _criteria.setdefault(marker.args[0], {"ok": True, "details": []})
    expected_failure = hasattr(rep, "wasxfail")
    if not rep.passed and not expected_failure:
        entry["ok"] = False
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]
    if rep.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["details"]:
            line += "  | " + "; ".join(e["details"])
        terminalreporter.write_line(line)
