"""Desk-scale training probe: epochs/seconds and RMSE ratio vs persistence."""
import time

import numpy as np

from shapcast.baselines import persistence
from shapcast.model import ModelConfig, forward_arrays, mask_bit_arrays
from shapcast.schema import GroupMask
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


def main():
    t0 = time.monotonic()
    ds = generate_dataset({"train": 5000, "val": 500, "test": 500}, seed=11)
    print(f"dataset generated in {time.monotonic() - t0:.1f}s", flush=True)

    targets = np.stack([ex.future_target for ex in ds.test]).astype(np.float64)
    pers = np.stack([persistence(ex) for ex in ds.test]).astype(np.float64)
    pers_rmse = float(np.sqrt(np.mean((pers - targets) ** 2)))
    print(f"persistence test RMSE {pers_rmse:.4f}", flush=True)

    mc = ModelConfig(layers=1, d_model=8, heads=1)
    tc = TrainConfig(optimizer="adam", learning_rate=1e-3, batch_size=64,
                     max_epochs=10, patience=5, mask_probability=0.5, seed=7)

    times = []

    def progress(entry):
        times.append(time.monotonic())
        print(f"epoch {entry['epoch']}: train {entry['train_loss']:.4f} "
              f"val {entry['val_loss']:.4f} ({entry['seconds']:.1f}s)",
              flush=True)

    t0 = time.monotonic()
    params, logs = train(ds.train, ds.val, mc, tc, flavor="shapformer",
                         progress=progress)
    seconds = time.monotonic() - t0
    rmse = full_rmse(params, ds.test)
    print(f"trained {len(logs)} epochs in {seconds:.0f}s", flush=True)
    print(f"model test RMSE {rmse:.4f}  ratio {rmse / pers_rmse:.3f}",
          flush=True)


if __name__ == "__main__":
    main()
