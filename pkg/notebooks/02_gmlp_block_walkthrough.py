"""
Inside a gMLP block
===================

Feature maps become token matrices, a block mixes channels with two
projections and tokens with the spatial gate, then adds the input back.
"""

import numpy as np

from veloxnet import tensor as T
from veloxnet.gmlp import GmlpBlock, GmlpConfig, SpatialGatingUnit, map_from_tokens, tokens_from_map

rng = np.random.default_rng(0)

# a 2-image batch of 4x4 maps with 6 channels
x = rng.standard_normal((2, 6, 4, 4)).astype(np.float32)
tokens = tokens_from_map(x)
print("tokens:", tokens.shape)          # (N, H*W, C)
print("token 5 is row 1, col 1:", np.array_equal(tokens[:, 5], x[:, :, 1, 1]))
back = map_from_tokens(tokens, 4, 4)
print("roundtrip exact:", np.ascontiguousarray(back).tobytes() == x.tobytes())

# channel split used by the paper-eq gate
z = rng.standard_normal((16, 6)).astype(np.float32)
z1, z2 = T.split_channels(z)
print("split:", z1.shape, z2.shape)

# with W_g = 0 and b_g = 1 the gate passes Z1 through unchanged
sgu = SpatialGatingUnit(GmlpConfig.preset("paper-eq", d_model=6, n_tokens=16))
print("init gate is identity on Z1:", np.array_equal(sgu.forward(z), z1))

# table-i gates with a circular token shift instead of a dense W_g
shift = SpatialGatingUnit(GmlpConfig.preset("table-i", d_model=6, inner_norm=False))
print("shift gate:", np.allclose(shift.forward(z), z * np.roll(z, 1, axis=0)))

# zero V makes the block output its input
block = GmlpBlock(GmlpConfig.preset("table-i", d_model=6), rng=rng)
block.V.params["weight"][...] = 0
print("residual identity:", np.ascontiguousarray(block.forward(x)).tobytes() == x.tobytes())
print("block params:", block.num_params(), "=", 2 * 6 ** 2 + 4 * 6)
