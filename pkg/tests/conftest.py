import numpy as np
import pytest

from tassn import graph as gr
from tassn import hand, synth


@pytest.fixture(scope="session")
def template():
    return hand.build_template()


@pytest.fixture(scope="session")
def hierarchy(template):
    return gr.coarsen(gr.build_graph(template.faces, template.num_vertices), 3)


@pytest.fixture(scope="session")
def clip(template):
    return synth.generate_clip(template, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
