import pytest

from wgftok.config import parse_config

TINY_YAML = """\
mode: wartok
seed: 7
data:
  train_size: 64
  test_size: 16
tokenizer:
  width: 32
  heads: 4
  enc_layers: 1
  dec_layers: 1
  codebook_size: 16
  n_tokens: 8
target:
  layers: 1
  width: 32
proxy:
  width: 32
prior:
  layers: 1
  width: 32
  steps: 20
  batch_size: 16
train:
  steps: 20
  batch_size: 8
  lambda_wgf: 0.001
  eval_every: 10
  checkpoint_every: 10
compare:
  eval_every: 5
"""


@pytest.fixture
def tiny_yaml():
    return TINY_YAML


@pytest.fixture
def tiny_cfg():
    return parse_config(TINY_YAML)


@pytest.fixture
def tiny_config_file(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_YAML)
    return p


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
