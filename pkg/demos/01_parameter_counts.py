"""
Counting parameters of the GUNN presets
=======================================

Build each preset, print where its parameters live and check the totals.
No weights are allocated for the large networks; counts come from the network description.
"""

from gunn.arch import (build_gunn15, build_gunn18, build_gunn24, build_tiny_pair, build_wide_gunn18,
                       parameter_breakdown, parameter_count)

###############################################################################
# The CIFAR networks: a 3x3 stem, a 1x1 expansion, then GUNN stages joined by
# 1x1 conv + BN transitions with average pooling. Convolutions carry no bias;
# BN scale and shift are counted, and so is the classifier bias.

spec = build_gunn15()
for name, count in parameter_breakdown(spec):
    print(f"{name:<28} {count:>10,}")
print(f"{'total':<28} {parameter_count(spec):>10,}")

###############################################################################
# Totals for every preset. The 100-class heads only change the classifier.

for label, s in [("GUNN-15 / C10", build_gunn15()), ("GUNN-15 / C100", build_gunn15(classes=100)),
                 ("GUNN-24 / C10", build_gunn24()), ("GUNN-24 / C100", build_gunn24(classes=100)),
                 ("GUNN-18 / ImageNet", build_gunn18()), ("Wide-GUNN-18 / ImageNet", build_wide_gunn18())]:
    print(f"{label:<24} {parameter_count(s):>12,}")

###############################################################################
# The desk-scale twins share one parameter set: only the update order differs.

gunn, sunn = build_tiny_pair("1/20", partitions=(4, 5, 6))
print("tiny twins:", parameter_count(gunn), parameter_count(sunn))
