"""Scratch probe: does step1 + step2 + mine recover latent classes? (not shipped)"""
import time

import numpy as np

from muco.corpus import SyntheticSpec, generate_synthetic
from muco.encoder import EncoderState
from muco.miner import calibrate_gamma, mine, pair_accuracy, train_step2
from muco.prototypes import TrainConfig, init_prototypes, train_step1


def ari(labels_a, labels_b):
    from collections import Counter
    pairs = Counter(zip(labels_a, labels_b))
    a_cnt = Counter(labels_a)
    b_cnt = Counter(labels_b)
    n = len(labels_a)
    comb = lambda x: x * (x - 1) / 2
    idx = sum(comb(v) for v in pairs.values())
    sa = sum(comb(v) for v in a_cnt.values())
    sb = sum(comb(v) for v in b_cnt.values())
    expected = sa * sb / comb(n) if n > 1 else 0
    mx = 0.5 * (sa + sb)
    return (idx - expected) / (mx - expected) if mx != expected else 1.0


def run_seed(seed, spec=None, epochs1=40, epochs2=10, verbose=True):
    t0 = time.time()
    spec = spec or SyntheticSpec(
        predefined_classes=3, latent_classes=3, noise_types=6,
        sentences=150, seed=97,  # corpus fixed; pipeline seed varies
    )
    data = generate_synthetic(spec)
    corp = data.corpus
    enc = EncoderState.create(data.embeddings, hidden_dim=32, window=2, seed=seed)
    frozen = enc.snapshot()
    examples = corp.entity_examples()
    table = init_prototypes(list(corp.classes), 32, seed=seed)
    log = train_step1(examples, enc, table, TrainConfig(epochs=epochs1, lr=0.05, seed=seed), corp)
    clf = train_step2(examples, frozen, enc, TrainConfig(epochs=epochs2, lr=0.05, batch_size=128, seed=seed), corp)
    acc = pair_accuracy(clf, examples, frozen, enc, corp, n_pairs=1000, seed=seed)
    candidates = corp.o_occurrences()
    assign = mine(clf, candidates, frozen, enc, corp, gamma=0.68, min_size=3)
    # score vs sidecar
    true_of = lambda o: data.latent_labels[(o.sentence_id, o.token_index)]
    assigned = [(i, l) for i, l in enumerate(assign.labels) if l >= 0]
    mined_lbls = [l for _, l in assigned]
    true_lbls = [true_of(assign.candidates[i]) for i, _ in assigned]
    score = ari(mined_lbls, true_lbls) if assigned else float("nan")
    # IC per class
    ics = []
    for k in range(assign.n_classes):
        members = [true_of(c) for c, l in zip(assign.candidates, assign.labels) if l == k]
        from collections import Counter as C
        ics.append(C(members).most_common(1)[0][1] / len(members))
    # composition: which latent classes ended up in mined classes
    comp = {}
    for k in range(assign.n_classes):
        from collections import Counter as C
        comp[assign.class_names[k]] = dict(C(true_of(c) for c, l in zip(assign.candidates, assign.labels) if l == k))
    n_latent_total = sum(1 for v in data.latent_labels.values() if v.startswith("u"))
    n_latent_assigned = sum(1 for i, l in assigned if true_of(assign.candidates[i]).startswith("u"))
    if verbose:
        print(f"seed={seed} loss1={log[0]:.3f}->{log[-1]:.3f} pair_acc={acc:.3f} "
              f"r={assign.n_classes} ARI={score:.3f} IC={[f'{x:.2f}' for x in ics]} "
              f"irrelevant={assign.irrelevant_fraction():.2f} "
              f"latent_coverage={n_latent_assigned}/{n_latent_total} t={time.time()-t0:.1f}s")
        print("  composition:", comp)
    return score, ics, assign


if __name__ == "__main__":
    for s in range(5):
        run_seed(s)
