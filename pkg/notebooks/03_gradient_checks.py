"""
Checking gradients numerically
==============================

Every backward pass is compared with central differences in double
precision, first layer by layer and then through a small whole model.
"""

from veloxnet.gradcheck import layer_suite, model_check
from veloxnet.models import REDUCED_VELOXNET, build_model_graph

for result in layer_suite(seed=0):
    print(result.line())

# the reduced VeloxNet keeps every node kind but is small enough to probe
print("reduced instance:", REDUCED_VELOXNET)
for preset in ("table-i", "paper-eq"):
    print(model_check(build_model_graph("veloxnet", preset=preset, reduced=True)).line())
print(model_check(build_model_graph("squeezenet", reduced=True)).line())
