import pytest

TINY_CFG = """\
seed = 0
seeds = 0,1
env.horizon = 8
env.n_envs = 4
demo.episodes = 4
flow.hidden = 16,16
flow.pretrain_steps = 30
flow.batch_size = 32
score_control.variance_hidden = 8
ppo.minibatch_size = 16
ppo.update_epochs = 2
ppo.critic_hidden = 16
finetune.n_iters = 2
finetune.lr_cycle = 2
finetune.critic_lr_warmup = 1
eval.episodes = 4
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    """Write a seconds-scale config into a fresh directory and return its path."""
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG + f"output_dir = {tmp_path / 'out'}\n")
    return path


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record one acceptance line; printed now and again in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
