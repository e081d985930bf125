"""geodex: geometry-aware goal-conditioned multi-task RL on a torque-rig
rotation proxy, with a paired-point-cloud geometry encoder.

Pipeline: generate or ingest objects -> pretrain the encoder (object
classification + relative-rotation regression) -> train a single DDPG+HER
policy across objects, conditioned on the frozen 512-dim geometry feature.
"""

__version__ = "0.1.0"
