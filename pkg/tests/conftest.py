import numpy as np
import pytest

from skelcl.data import SkeletonSequence, SynthSpec, reduced_graph, synth_generate


@pytest.fixture
def graph11():
    return reduced_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    spec = SynthSpec(class_count=4, sequences_per_class=6, num_joints=11,
                     raw_frames=24, noise_scale=0.01)
    return synth_generate(spec, seed=99)


def make_sequence(rng, C=3, T=20, V=11, P=1, label=None):
    data = rng.normal(size=(C, T, V, P)).astype(np.float32)
    return SkeletonSequence(data=data, label=label)
