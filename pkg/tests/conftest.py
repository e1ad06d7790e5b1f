import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class Seeded:
    """One demo-config training run and its held-out world."""

    def __init__(self, run, seed):
        from dualview import experiments as ex
        from dualview.corpus import generate_corpus

        self.run, self.seed = run, seed
        self.train_corpus = generate_corpus(ex.train_world(run, seed))
        self.test = generate_corpus(ex.test_world(run, seed))
        self.keywords = run.world.keywords()
        self.vocab = ex.run_vocab(run, self.train_corpus, seed)
        self.trial = ex.run_trial(run, seed, corpus=self.train_corpus, vocab=self.vocab)
        self.random_params = ex.random_model(run, self.vocab, seed)

    @property
    def params(self):
        return self.trial.params

    @property
    def hyper(self):
        return self.trial.hyper


@pytest.fixture(scope="session")
def demo_run():
    from dualview.experiments import demo_config

    return demo_config()


@pytest.fixture(scope="session")
def demo_models(demo_run):
    """Models trained with the demo config for seeds 0-4, shared across modules."""
    return [Seeded(demo_run, s) for s in demo_run.seeds]


PIPELINE = ("gen-data", "build-pairs", "train", "eval-retrieval", "eval-grounding",
            "eval-zeroshot", "train-captioner", "eval-caption")


def run_pipeline(out, *extra):
    """Run every pipeline command in order; return {command: exit code}."""
    from dualview.cli import main

    return {cmd: main([cmd, "--out", str(out), *extra]) for cmd in PIPELINE}


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """The demo pipeline run twice from scratch with the same seed."""
    root = tmp_path_factory.mktemp("pipeline")
    return [(root / name, run_pipeline(root / name)) for name in ("first", "second")]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
