import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

TINY_YAML = """\
sim:
  episode_seconds: 1.0
ppo:
  envs: 4
  horizon: 8
  minibatches: 2
  epochs: 1
  lstm_hidden: 8
  mlp_hidden: 16
  terrain_hidden: 8
  terrain_latent: 4
  iterations: 3
  checkpoint_every: 2
student:
  window: 4
  latent: 6
  lstm_hidden: 8
  terrain_hidden: 8
  terrain_latent: 4
  decoder_hidden: 8
  policy_hidden: [8, 8]
  head_hidden: 8
  envs: 4
  steps_per_round: 8
  minibatch: 8
  updates: 3
eval:
  envs: 4
  episodes_per_env: 1
  seeds: [0]
  noise: [0.0, 2.0]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML)
    return path
