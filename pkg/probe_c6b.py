"""Second training probe: more steps and a larger model."""
import time

import numpy as np

from shapcast.baselines import persistence
from shapcast.model import ModelConfig, forward_arrays
from shapcast.synthgen import generate_dataset
from shapcast.training import TrainConfig, train
from shapcast import numkernel as nk


def full_rmse(params, examples, chunk=250):
    preds = []
    with nk.no_grad():
        for lo in range(0, len(examples), chunk):
            batch = examples[lo:lo + chunk]
            past = np.stack([ex.past_target for ex in batch])
            covs = np.stack([ex.covariate_values for ex in batch])
            day = np.ones((len(batch), 7), dtype=bool)
            cov = np.ones((len(batch), 7), dtype=bool)
            out = forward_arrays(past, covs, day, cov, params)
            preds.append(out.data.astype(np.float64))
    preds = np.concatenate(preds)
    targets = np.stack([ex.future_target for ex in examples]).astype(np.float64)
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def run(ds, pers_rmse, mc, tc, tag):
    print(f"--- {tag} ---", flush=True)

    def progress(entry):
        print(f"  epoch {entry['epoch']}: train {entry['train_loss']:.4f} "
              f"val {entry['val_loss']:.4f} ({entry['seconds']:.1f}s)",
              flush=True)

    t0 = time.monotonic()
    params, logs = train(ds.train, ds.val, mc, tc, flavor="shapformer",
                         progress=progress)
    seconds = time.monotonic() - t0
    rmse = full_rmse(params, ds.test)
    print(f"{tag}: {len(logs)} epochs {seconds:.0f}s "
          f"RMSE {rmse:.4f} ratio {rmse / pers_rmse:.3f}", flush=True)


def main():
    ds = generate_dataset({"train": 5000, "val": 500, "test": 500}, seed=11)
    targets = np.stack([ex.future_target for ex in ds.test]).astype(np.float64)
    pers = np.stack([persistence(ex) for ex in ds.test]).astype(np.float64)
    pers_rmse = float(np.sqrt(np.mean((pers - targets) ** 2)))
    print(f"persistence test RMSE {pers_rmse:.4f}", flush=True)

    run(ds, pers_rmse,
        ModelConfig(layers=1, d_model=8, heads=1),
        TrainConfig(optimizer="adam", learning_rate=1e-3, batch_size=32,
                    max_epochs=40, patience=10, mask_probability=0.5, seed=7),
        "A: d8 h1 L1 b32 40ep")

    run(ds, pers_rmse,
        ModelConfig(layers=2, d_model=16, heads=2),
        TrainConfig(optimizer="adam", learning_rate=1e-3, batch_size=32,
                    max_epochs=20, patience=10, mask_probability=0.5, seed=7),
        "B: d16 h2 L2 b32 20ep")


if __name__ == "__main__":
    main()
