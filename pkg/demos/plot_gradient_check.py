"""
Checking the reverse pass
=========================

Every trainable scalar of a small random model is nudged up and down and the
central difference of the loss is compared with the analytic gradient. A
deliberately flipped sign in the sigmoid derivative is caught immediately.
"""
import numpy as np

from stemil.gradients import fd_check
from stemil.model import random_bags, random_model

rng = np.random.default_rng(0)
model = random_model(T=3, h=2, E=4, m=6, rng=rng)
bags = random_bags(2, 6, rng)

print(fd_check(model, bags).format_table())

###############################################################################
# Now with a sign error injected into the backward pass.
print()
print(fd_check(model, bags, flip_sign="sigmoid").format_table())
