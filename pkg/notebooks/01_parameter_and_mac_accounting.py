"""
Counting parameters and MACs
============================

Both architectures are declared as graphs first, so their costs can be
read off without allocating a single weight.
"""

from veloxnet.accounting import cost_report, emit_summary
from veloxnet.models import ABLATIONS, Model, build_squeezenet, build_veloxnet

# the default VeloxNet: 156 channels everywhere, 8 gMLP blocks in 3 stages
velox = build_veloxnet(classes=5, preset="table-i")
print(emit_summary(cost_report(velox)))

# the reference SqueezeNet with a batchnorm after every convolution
squeeze = build_squeezenet(classes=5)
print(emit_summary(cost_report(squeeze)))

# one gMLP block costs 2 d^2 + 4 d parameters whatever the map size
d = 156
print("per block:", 2 * d * d + 4 * d)

# the closed forms are checked against allocated arrays when a model is built
built = Model(velox)
print("allocated:", built.num_params(), "closed form:", cost_report(built).total_params)

# ablation variants are regular graphs too
for name in ABLATIONS:
    rep = cost_report(build_veloxnet(5, ablation=name))
    print(f"{name:<14} params={rep.total_params:>9,} MACs={rep.total_macs / 1e6:7.1f}M")

# the dense spatial projection of paper-eq grows with (H*W)^2 at the 55x55 stage
dense = cost_report(build_veloxnet(5, preset="paper-eq"))
print("paper-eq total:", f"{dense.total_params:,}", "gmlp2:", f"{dense.row('gmlp2').params:,}")
