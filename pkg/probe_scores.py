"""Scratch probe: score distributions per pair population. (not shipped)"""
import numpy as np

from muco.corpus import SyntheticSpec, generate_synthetic
from muco.encoder import EncoderState
from muco.miner import _encode_pair_inputs, _symmetric_logits, train_step2
from muco.grad import sigmoid
from muco.prototypes import TrainConfig, init_prototypes, train_step1
from muco.corpus import Occurrence

spec = SyntheticSpec(predefined_classes=3, latent_classes=3, noise_types=6,
                     sentences=150, seed=97)
data = generate_synthetic(spec)
corp = data.corpus
seed = 0
enc = EncoderState.create(data.embeddings, hidden_dim=32, window=2, seed=seed)
frozen = enc.snapshot()
examples = corp.entity_examples()
table = init_prototypes(list(corp.classes), 32, seed=seed)
train_step1(examples, enc, table, TrainConfig(epochs=40, lr=0.05, seed=seed), corp)
clf = train_step2(examples, frozen, enc,
                  TrainConfig(epochs=10, lr=0.05, batch_size=128, seed=seed), corp)

d = clf.hidden_dim
w = clf.weight.values[:, 0]
blocks = {name: w[i*d:(i+1)*d] for i, name in enumerate(
    ["h_i", "h_j", "t_i", "t_j", "|h-h|", "|t-t|", "|hi-ti|", "|hj-tj|"])}
print("block weight norms:", {k: f"{np.linalg.norm(v):.3f}" for k, v in blocks.items()})
print("bias:", clf.bias.values)

# entity pairs
occ_ent = [Occurrence(e.sentence_id, e.token_index) for e in examples]
He, Te = _encode_pair_inputs(corp, occ_ent, frozen, enc)
Lent = _symmetric_logits(clf, He, Te)
lbl_ent = np.array([e.label for e in examples])
same = lbl_ent[:, None] == lbl_ent[None, :]
off = ~np.eye(len(occ_ent), dtype=bool)
print(f"entity same-class logits: mean {Lent[same & off].mean():.2f}  cross: {Lent[~same].mean():.2f}")

# O pairs by true type
cands = corp.o_occurrences()
Ho, To = _encode_pair_inputs(corp, cands, frozen, enc)
Lo = _symmetric_logits(clf, Ho, To)
true = np.array([data.latent_labels[(o.sentence_id, o.token_index)] for o in cands])
is_latent = np.array([t.startswith("u") for t in true])
offo = ~np.eye(len(cands), dtype=bool)
same_o = true[:, None] == true[None, :]
for name, mask in [
    ("same-latent", same_o & offo & is_latent[:, None] & is_latent[None, :]),
    ("cross-latent", ~same_o & is_latent[:, None] & is_latent[None, :]),
    ("same-noise", same_o & offo & ~is_latent[:, None] & ~is_latent[None, :]),
    ("cross-noise", ~same_o & ~is_latent[:, None] & ~is_latent[None, :]),
    ("latent-noise", is_latent[:, None] & ~is_latent[None, :]),
]:
    vals = Lo[mask]
    print(f"{name:13s} logits: mean {vals.mean():7.2f}  p5 {np.percentile(vals,5):7.2f} "
          f"p50 {np.percentile(vals,50):7.2f}  p95 {np.percentile(vals,95):7.2f} "
          f"frac>0.754 {(sigmoid(vals)>0.68).mean():.3f}")

# raw distance stats in the two spaces
def dstats(X, mask, name):
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    print(f"  {name}: mean dist same {D[same_o & offo].mean():.3f} cross {D[~same_o].mean():.3f}")

print("frozen-space distances (all O pairs):")
dstats(Ho, same_o, "H")
print("live-space distances:")
dstats(To, same_o, "T")
mv_ent = np.linalg.norm(He - Te, axis=1)
mv_lat = np.linalg.norm(Ho[is_latent] - To[is_latent], axis=1)
mv_noi = np.linalg.norm(Ho[~is_latent] - To[~is_latent], axis=1)
print(f"movement |h-t|: entities {mv_ent.mean():.3f}  latent {mv_lat.mean():.3f}  noise {mv_noi.mean():.3f}")
print(f"norm H ent {np.linalg.norm(He,axis=1).mean():.3f} T ent {np.linalg.norm(Te,axis=1).mean():.3f} "
      f"T latent {np.linalg.norm(To[is_latent],axis=1).mean():.3f} T noise {np.linalg.norm(To[~is_latent],axis=1).mean():.3f}")
