"""Which labels were in the batch?

For cross-entropy, the last layer's weight gradient has a row with negative
entries exactly for classes present in the batch (with non-negative inputs to
that layer). With all-distinct labels this recovers the label set; when two
images share a label the set is still right but the multiplicities are not,
and the guess says so rather than inventing them.

    python demos/labels_from_gradients.py
"""
import numpy as np

from gradinv import harness
from gradinv.data_io import DataConfig
from gradinv.labels import infer_batch_labels, label_collision_stats
from gradinv.models import build_model, client_step


def main():
    ds = harness.load_dataset(DataConfig(resolution=None), "test")
    model = build_model("convnet6", (1, 28, 28), seed=0)
    rng = np.random.default_rng(0)

    idx = [int(rng.choice(np.flatnonzero(ds.labels == c))) for c in (2, 5, 7, 9)]
    guess = infer_batch_labels(client_step(model, ds.images[idx], ds.labels[idx]), model)
    print(f"distinct batch {sorted(ds.labels[idx].tolist())}: found {guess.labels}, "
          f"multiplicity known {guess.multiplicity_known}")

    idx = [int(i) for i in rng.choice(np.flatnonzero(ds.labels == 3), 3, replace=False)]
    idx.append(int(rng.choice(np.flatnonzero(ds.labels == 8))))
    guess = infer_batch_labels(client_step(model, ds.images[idx], ds.labels[idx]), model)
    print(f"batch {sorted(ds.labels[idx].tolist())}: found {guess.labels}, "
          f"multiplicity known {guess.multiplicity_known}")

    # how often does a random batch contain a repeated label at all?
    for b in (2, 4, 8, 11):
        p = label_collision_stats(ds.labels, b, 5000, rng)["p_duplicate"]
        print(f"batch size {b:2d}: P(repeated label) ~ {p:.3f}")


if __name__ == "__main__":
    main()
