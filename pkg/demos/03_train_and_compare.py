# coding: utf-8

# # DSMIL against MB-DSMIL-CL-PL on one fold
#
# A shortened version of the acceptance benchmark: one fold, fewer slides and
# fewer epochs, so it finishes in about a minute. The contrastive model should
# already classify instances noticeably better than plain DSMIL.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from protomil.evaluation import evaluate_model, export_heatmap
from protomil.models import forward
from protomil.synth import SynthConfig, generate_dataset
from protomil.training import TrainConfig, train_fold

out = Path(tempfile.mkdtemp(prefix="protomil_demo3_"))
manifest = generate_dataset(
    SynthConfig(n_classes=4, dim=32, n_slides_per_class=15, n_test_slides_per_class=5, class_separation=4.0, seed=7),
    out / "data",
)


# Same seed and fold for both models. The projection width is cut down from
# the default 1024 to keep the run short.

# In[2]:

results = {}
for kind in ("dsmil", "mbdsmil_cl_pl"):
    config = TrainConfig(model=kind, epochs=25, warmup_epochs=5, e_dim=64, learning_rate=3e-4, seed=0)
    run = train_fold(manifest, fold=0, config=config, out_dir=out / kind)
    results[kind] = (run, evaluate_model(kind, run.state.params, manifest, manifest.split("test")))
    print(kind, "validation F1 by epoch:", [round(r["val_macro_f1"], 2) for r in run.log][::5])


# In[3]:

for kind, (_, rep) in results.items():
    print("%-14s slide F1 %.3f  instance F1 %.3f  instance AUC %.3f  attention AUC %.3f"
          % (kind, rep.slide_macro_f1, rep.instance_macro_f1, rep.instance_ovr_auc, rep.attention_auc))


# Instance confusion matrix of the contrastive model (rows are ground truth,
# the last row and column are normal):

# In[4]:

print(np.array(results["mbdsmil_cl_pl"][1].instance_confusion))


# Finally, attention heatmaps for one tumour test slide. The checkpoint on
# disk can be evaluated again later with `protomil eval`.

# In[5]:

entry = next(e for e in manifest.split("test") if e.slide_label == 0)
bag = manifest.load(entry)
for kind, (run, _) in results.items():
    attention = forward(kind, run.state.params, bag.features).attention.data[entry.slide_label]
    export_heatmap(bag, attention, out / f"{kind}_{entry.slide_id}.pgm")
print("outputs in", out)
