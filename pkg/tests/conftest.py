import time

import numpy as np
import pytest

from alignlm import model as M
from alignlm.numeric import finite_difference_grad, forward_backward, max_relative_error
from alignlm.corpus import build_corpus, write_corpus
from alignlm.pipeline import StageConfig, evaluate, run_stage2, run_stage3

# one "PASS/FAIL criterion N: ..." line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture
def micro_cfg():
    return M.preset("micro")


@pytest.fixture
def micro_params(micro_cfg):
    params = M.init_params(micro_cfg, seed=3)
    M.add_score_head(params, micro_cfg, seed=3, bias=0.1, std=0.5)
    return params


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Stage 2, two stage-3 seeds and a stage-3-only run on the 2,000-pair planted corpus.

    Shared by the end-to-end and ensemble checks; about 90 s on one core.
    """
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("desk")
    corpus = build_corpus(2000, seed=7, teacher_seed=7, k=3)
    paths = {k: str(v) for k, v in write_corpus(corpus, root).items()}
    s2 = run_stage2(StageConfig.desk(2, train_manifest=paths["pretrain"], val_manifest=paths["pseudo_val"], seed=7))
    s3_cfg = dict(train_manifest=paths["finetune_train"], val_manifest=paths["finetune_val"])
    s3 = {seed: run_stage3(StageConfig.desk(3, seed=seed, **s3_cfg), s2) for seed in (7, 13)}
    s3_only = run_stage3(StageConfig.desk(3, seed=7, **s3_cfg), None)
    test = corpus.finetune_test
    return {
        "corpus": corpus,
        "paths": paths,
        "stage2": s2,
        "stage3": s3,
        "stage2_teacher": evaluate(s2, corpus.pseudo_val),
        "stage2_test": evaluate(s2, test),
        "stage3_test": {seed: evaluate(ck, test) for seed, ck in s3.items()},
        "stage3_only_test": evaluate(s3_only, test),
        "seconds": time.perf_counter() - t0,
    }


def random_lists(rng, n_lists, lo, hi, ties=False):
    """``n_lists`` random score vectors with lengths in ``[lo, hi]``; integer-valued when ``ties``."""
    out = []
    for _ in range(n_lists):
        n = int(rng.integers(lo, hi + 1))
        x = rng.integers(0, max(2, n // 2), size=n).astype(float) if ties else rng.normal(size=n)
        out.append(x)
    return out


def grad_error(graph_fn, params, epsilon=1e-6):
    """Max relative error between autograd and central differences of ``graph_fn(tensors)``."""
    _, auto = forward_backward(graph_fn, params)
    numeric = finite_difference_grad(lambda p: float(graph_fn(p.as_tensors()).data), params, epsilon)
    return max_relative_error(auto, numeric)
