# coding: utf-8

# # The pieces behind MB-DSMIL-CL-PL
#
# This walk-through pokes at the individual components: feature-space
# augmentation, the class prototypes and soft labels, the CLAM decision rule,
# and the finite-difference gradient check that guards the whole loss.

# In[1]:

import numpy as np

from protomil.augment import AugmentConfig, make_views, simcl_noise
from protomil.dataio import FeatureBag
from protomil.models import clam_predict, forward, init_params
from protomil.prototypes import init_prototypes, momentum_update_label, prototype_ema_update, restricted_assign
from protomil.training import gradcheck_setup, gradient_check

rng = np.random.default_rng(0)


# ## Augmentation
#
# The noise has a fixed L2 norm and always points into the feature's own
# orthant, so no component changes sign.

# In[2]:

h = rng.standard_normal(6)
noisy = simcl_noise(h, 0.4, rng)
print(np.round(h, 3))
print(np.round(noisy, 3))
print("noise norm", np.linalg.norm(noisy - h))

weak, strong = make_views(h, AugmentConfig(), rng)
print("weak / strong distances:", np.linalg.norm(weak - h), np.linalg.norm(strong - h))


# ## Prototypes and soft labels
#
# An instance from a subtype-0 slide may only be assigned subtype 0 or normal,
# whichever prototype is closer. The soft label then moves a fifth of the way
# towards that choice.

# In[3]:

bank = init_prototypes(n_classes=4, e_dim=8, seed=0)
z_vec = bank.mu[0] + 0.1 * rng.standard_normal(8)
z_vec /= np.linalg.norm(z_vec)
z = restricted_assign(z_vec, bank, slide_label=0, normal_index=3)
s = np.array([0.5, 0.0, 0.0, 0.5])
for step in range(5):
    s = momentum_update_label(s, z, alpha=0.8)
    print(step, np.round(s, 4))

prototype_ema_update(bank, int(np.argmax(z)), z_vec)
print("prototype norms stay at one:", np.linalg.norm(bank.mu, axis=1))


# ## The CLAM decision rule
#
# A slide is normal only if every subtype branch prefers its negative logit.
# Otherwise the strongest positive logit wins; a tie counts as non-normal.

# In[4]:

print(clam_predict(np.array([[1.0, -1.0], [1.0, -1.0]])))  # 2 = normal
print(clam_predict(np.array([[0.0, 1.0], [0.0, 0.5]])))    # 0
print(clam_predict(np.array([[0.2, 0.2], [1.0, -1.0]])))   # 0 (tie is not normal)


# ## One forward pass per architecture

# In[5]:

H = rng.standard_normal((5, 8))
for kind in ("dsmil", "mbdsmil", "clam"):
    out = forward(kind, init_params(kind, 3, 8, q_dim=4, hidden=6), H)
    print(kind, "bag logits", np.round(out.bag_logits.data, 3), "attention", out.attention.shape)


# ## Gradient check
#
# Central differences against the hand-rolled reverse-mode gradients of the
# full loss, bag term plus instance KL plus supervised contrastive term.

# In[6]:

bag = FeatureBag("demo", rng.standard_normal((4, 8)))
state, ctx = gradcheck_setup("mbdsmil_cl_pl", bag, slide_label=0, n_classes=3)
result = gradient_check(state, ctx)
print("max relative error: %.2e" % result["max_rel_error"])
for name, err in sorted(result["groups"].items()):
    print("  %-16s %.2e" % (name, err))
