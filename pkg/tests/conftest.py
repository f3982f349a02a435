import sys
from pathlib import Path

import pytest
import torch

from kreplay.corpus import CorpusSizes, generate_concept_bank, generate_corpora, load_dataset

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

TINY_SIZES = CorpusSizes(pretrain=24, generic_train=20, generic_val=4, generic_test=4, replay=6,
                         concept_val=4, concept_test=6)

# acceptance criteria append "(number, passed, detail)" here; printed in the summary
CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    bank = generate_concept_bank(6, 3, 16, 0)
    generate_corpora(bank, TINY_SIZES, 0, root)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_root):
    return load_dataset(tiny_root)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


TINY_CONF = """\
num_concepts = 6
num_unseen = 3
n_pretrain = 24
n_generic_train = 16
n_generic_val = 4
n_generic_test = 4
n_replay = 6
n_concept_val = 4
n_concept_test = 6
d_model = 8
d_ff = 16
max_len = 12
epochs = 2
batch_size = 4
beam_width = 2
"""


@pytest.fixture
def tiny_conf(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONF)
    return path
