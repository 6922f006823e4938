"""
From a hard tree to a soft network
==================================

A complete depth-3 tree is compiled into the three-layer soft tree and
evaluated at decreasing temperatures. As the temperatures shrink the leaf
weights collapse onto the leaf that ordinary traversal reaches.
"""
import numpy as np

from stemil.ert import hard_traverse, random_complete_tree
from stemil.soft_tree import build_routing, convert_tree, leaf_weights, soft_forward

rng = np.random.default_rng(7)
tree = random_complete_tree(3, 4, rng)

###############################################################################
# The routing matrix has one row per leaf and one column per internal node.
# Entry -1 means the path turns left at that node, +1 right, 0 not visited.
print(build_routing(3).R)

###############################################################################
# Pick an input and compare the hard answer with soft ones.
x = rng.normal(size=4)
leaf, prob = hard_traverse(tree, x)
print(f"hard traversal: leaf {leaf}, p = {prob:.4f}")

for temp in [10.0, 1.0, 0.1, 0.01, 1e-4]:
    p = convert_tree(tree, 1, 4, temp)
    w = leaf_weights(p, x)
    print(f"temperature {temp:>7g}: argmax leaf {np.argmax(w)}, "
          f"weight {w.max():.4f}, output {soft_forward(p, x)[0]:.4f}")
