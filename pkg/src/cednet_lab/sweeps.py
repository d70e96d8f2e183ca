"""Ablation grids: stage count, two-stage block allocation, LR block on/off."""

from __future__ import annotations

from .graph import CEDNET_T, ArchConfig

AXES = ("stages", "allocation", "lr-block")

# per-stage (n1, n2, n3) when varying the number of stages
STAGE_FAMILY = {1: (6, 9, 3), 2: (3, 6, 3), 3: (2, 4, 2), 4: (1, 4, 1)}

# (label, stage-1 blocks, stage-2 blocks or None)
ALLOCATION_FAMILY = (
    ("6/6", (6, 9, 3), None),
    ("5/6", (5, 10, 5), (1, 2, 1)),
    ("4/6", (4, 8, 4), (2, 4, 2)),
    ("3/6", (3, 6, 3), (3, 6, 3)),
    ("2/6", (2, 4, 2), (4, 8, 4)),
    ("1/6", (1, 2, 1), (5, 10, 5)),
)


def stage_sweep(base: ArchConfig = CEDNET_T) -> list:
    return [
        (f"m={m}", base.replace(stages=m, blocks=(base.blocks[0],) + blocks, per_stage_override=None))
        for m, blocks in STAGE_FAMILY.items()
    ]


def allocation_sweep(base: ArchConfig = CEDNET_T) -> list:
    out = []
    for label, first, second in ALLOCATION_FAMILY:
        if second is None:
            # the row has no second stage
            cfg = base.replace(stages=1, blocks=(base.blocks[0],) + first, per_stage_override=None)
        else:
            cfg = base.replace(stages=2, per_stage_override=(first, second))
        out.append((label, cfg))
    return out


def lr_block_sweep(base: ArchConfig = CEDNET_T) -> list:
    return [("lr_off", base.replace(lr_block=False)), ("lr_on", base.replace(lr_block=True))]


def sweep_configs(axis: str, base: ArchConfig = CEDNET_T) -> list:
    if axis == "stages":
        return stage_sweep(base)
    if axis == "allocation":
        return allocation_sweep(base)
    if axis == "lr-block":
        return lr_block_sweep(base)
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")


def toy_scale(config: ArchConfig, channels=(16, 32, 48, 64), stem_blocks: int = 1) -> ArchConfig:
    """Same block allocation at toy width for desk-scale training."""
    return config.replace(channels=channels, blocks=(stem_blocks,) + config.blocks[1:])
