# coding: utf-8

# # Synthetic bags with planted labels
#
# Real slide datasets with instance annotations are hard to come by, so the
# toolkit ships a generator. Every class is an isotropic Gaussian; tumour
# slides mix instances of their class with normal instances. Because the
# generating densities are known, the Bayes-optimal instance classifier is
# available as a yardstick.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from protomil.dataio import load_manifest
from protomil.evaluation import export_heatmap, ovr_auc_macro
from protomil.synth import SynthConfig, bayes_accuracy, bayes_posterior, class_means, generate_dataset

out = Path(tempfile.mkdtemp(prefix="protomil_demo1_"))


# Three tumour subtypes plus normal, 32-dimensional features. The separation
# is the distance between any two class means.

# In[2]:

config = SynthConfig(n_classes=4, dim=32, n_slides_per_class=5, n_test_slides_per_class=2,
                     class_separation=4.0, seed=1)
manifest = generate_dataset(config, out / "data")
print(manifest.label_space.class_names)
print(len(manifest.split("train")), "train slides,", len(manifest.split("test")), "test slides")


# The means really are equidistant:

# In[3]:

mu = class_means(config)
dists = np.linalg.norm(mu[:, None] - mu[None], axis=2)
print(np.round(dists, 3))


# Reading a bag back from disk gives features, instance labels and grid
# coordinates. Tumour instances sit in one contiguous run.

# In[4]:

manifest = load_manifest(out / "data" / "manifest.json")
entry = manifest.split("train")[0]
bag = manifest.load(entry)
print(entry.slide_id, bag.features.shape, np.bincount(bag.instance_labels, minlength=4))


# How well could any instance classifier do? The oracle posterior answers that.

# In[5]:

bags = [manifest.load(e) for e in manifest.entries]
feats = np.concatenate([b.features for b in bags])
labels = np.concatenate([b.instance_labels for b in bags])
print("Bayes accuracy: %.3f" % bayes_accuracy(config, feats, labels))
print("Bayes OvR AUC:  %.3f" % ovr_auc_macro(bayes_posterior(config, feats), labels, 4))


# Heatmaps take one score per instance and place it on the bag's grid. Here
# the score is the oracle's probability of the slide's own class.

# In[6]:

scores = bayes_posterior(config, bag.features)[:, entry.slide_label]
export_heatmap(bag, scores, out / "oracle.pgm")
export_heatmap(bag, scores, out / "oracle.csv", mode="csv")
print("wrote", out / "oracle.pgm")
