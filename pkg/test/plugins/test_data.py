"""Test plugins for the data pipeline: synthetic task pairs, verification, ingestion and batch streams."""

import threading
import time
from pathlib import Path

import numpy as np

from . import TestPlugin, TestResult, workdir

from adafilter_config import TaskPairSettings
from adafilter_data import (BatchStream, ingest_arrays, ingest_npz, load_dataset, read_manifest, read_split,
                            synth_task_generate, target_generator_ids, verify_dataset)
from adafilter_errors import DatasetError

SHIFT = TaskPairSettings(num_classes=4, image_size=8, overlap=0.5, hue_shift=0.1, warp_strength=0.5,
                         source_train_per_class=5, source_eval_per_class=3,
                         target_train_per_class=4, target_eval_per_class=3)


def _pair(name: str, seed: int = 0, shift: TaskPairSettings = SHIFT):
    return synth_task_generate(seed, shift, workdir() / "data-tests" / name)


class SyntheticPairDeterminismTest(TestPlugin):
    """Same (seed, shift) gives identical bytes; another seed gives different content."""

    operation = "synth_task_generate"
    description = "Deterministic synthetic task pairs"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            first, second, other = _pair("a"), _pair("b"), _pair("c", seed=1)
            for role in ("source", "target"):
                for split in ("train", "eval"):
                    a = (Path(first.path) / role / f"{split}.bin").read_bytes()
                    b = (Path(second.path) / role / f"{split}.bin").read_bytes()
                    c = (Path(other.path) / role / f"{split}.bin").read_bytes()
                    assert a == b, f"{role}/{split} differs between identical generations"
                    assert a != c, f"{role}/{split} identical across seeds"

            target = first.target
            assert target.splits["train"].per_class == [4, 4, 4, 4], target.splits["train"].per_class
            assert first.source.splits["eval"].count == 12, first.source.splits["eval"].count
            assert target.image_shape == (3, 8, 8), target.image_shape
            assert target_generator_ids(4, 0.5) == [0, 1, 4, 5], target_generator_ids(4, 0.5)
            assert target_generator_ids(4, 1.0) == [0, 1, 2, 3]
            assert first.target.generator.generator_ids == [0, 1, 4, 5]

            images, labels = read_split(target, "train")
            assert images.dtype == np.float32 and images.shape == (16, 3, 8, 8), images.shape
            assert labels.tolist() == sorted(labels.tolist()), "split is not class-major"
            return self.result(True, "Pairs reproducible; class counts and overlap as configured", start_time)
        except AssertionError as e:
            return self.result(False, "Synthetic pair check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class VerifyDatasetTest(TestPlugin):
    """A fresh dataset verifies; a flipped byte is reported and refused by the loader."""

    operation = "verify_dataset"
    description = "Checksums, disjointness and regeneration"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            pair = _pair("verify")
            directory = Path(pair.path) / "target"
            report = verify_dataset(directory)
            assert report.ok, report.format()
            assert report.disjoint is True and report.regenerated is True, report
            assert report.counts == {"train": 16, "eval": 12}, report.counts

            blob = bytearray((directory / "eval.bin").read_bytes())
            blob[7] ^= 0x01
            (directory / "eval.bin").write_bytes(bytes(blob))
            broken = verify_dataset(directory)
            assert not broken.ok, "corrupted dataset verified"
            assert any("Checksum mismatch" in p for p in broken.problems), broken.problems
            assert "FAILED" in broken.format()
            try:
                load_dataset(directory, "eval", batch_size=4)
                return self.result(False, "Corrupted split loaded", start_time)
            except DatasetError:
                pass
            try:
                read_manifest(directory / "missing")
                return self.result(False, "Missing manifest accepted", start_time)
            except DatasetError:
                pass
            return self.result(True, "Verification passes fresh data and flags corruption", start_time)
        except AssertionError as e:
            return self.result(False, "Verification check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class IngestTest(TestPlugin):
    """Small labelled archives are split per class and written in the dataset format."""

    operation = "ingest_arrays"
    description = "Stratified ingestion of external arrays"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(0)
            images = rng.integers(0, 256, size=(15, 3, 8, 8), dtype=np.uint8)
            labels = np.repeat([0, 1, 2], 5)
            archive = workdir() / "data-tests" / "small.npz"
            archive.parent.mkdir(parents=True, exist_ok=True)
            np.savez(archive, images=images, labels=labels)

            manifest = ingest_npz(archive, workdir() / "data-tests" / "ingested", eval_fraction=0.2, seed=3)
            assert manifest.name == "small", manifest.name
            assert manifest.splits["eval"].per_class == [1, 1, 1], manifest.splits["eval"].per_class
            assert manifest.splits["train"].per_class == [4, 4, 4], manifest.splits["train"].per_class
            stored, _ = read_split(manifest, "train")
            assert 0.0 <= stored.min() and stored.max() <= 1.0, "uint8 images were not scaled to [0, 1]"
            report = verify_dataset(manifest.directory)
            assert report.ok and report.regenerated is None, report.format()

            try:
                ingest_arrays("bad", images[:6], np.array([0, 0, 0, 0, 0, 1]), workdir() / "data-tests" / "bad")
                return self.result(False, "Class with a single example accepted", start_time)
            except DatasetError as e:
                assert "Class 1" in str(e), str(e)
            try:
                ingest_arrays("bad", images, labels[:-1], workdir() / "data-tests" / "bad")
                return self.result(False, "Mismatched label count accepted", start_time)
            except DatasetError:
                pass
            return self.result(True, "Ingestion stratifies and validates", start_time)
        except AssertionError as e:
            return self.result(False, "Ingestion check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class BatchStreamTest(TestPlugin):
    """Epoch order is seeded, eval order fixed, and prefetching never changes what is produced."""

    operation = "load_dataset"
    description = "Batch streams and background prefetch"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            directory = Path(_pair("stream").path) / "target"
            plain = load_dataset(directory, "train", batch_size=5, seed=7, flip=True, crop_padding=1)
            fetched = load_dataset(directory, "train", batch_size=5, seed=7, flip=True, crop_padding=1,
                                   prefetch=True)
            assert len(plain) == 4 and plain.size == 16, (len(plain), plain.size)
            for epoch in range(2):
                a, b = list(plain.epoch(epoch)), list(fetched.epoch(epoch))
                assert [len(y) for _, y in a] == [5, 5, 5, 1], [len(y) for _, y in a]
                assert all(np.array_equal(x1, x2) and np.array_equal(y1, y2) for (x1, y1), (x2, y2) in zip(a, b)), \
                    f"prefetch changed epoch {epoch}"
            order0 = np.concatenate([y for _, y in plain.epoch(0)])
            order1 = np.concatenate([y for _, y in plain.epoch(1)])
            assert sorted(order0.tolist()) == sorted(order1.tolist()), "epochs cover different examples"

            x0 = np.concatenate([x for x, _ in plain.epoch(0)])
            x1 = np.concatenate([x for x, _ in plain.epoch(1)])
            assert not np.array_equal(x0, x1), "two epochs produced identical batches"

            eval_stream = load_dataset(directory, "eval", batch_size=4)
            fixed = np.concatenate([y for _, y in eval_stream.epoch_fixed()])
            assert fixed.tolist() == sorted(fixed.tolist()), "eval stream is not in stored order"

            unaugmented = load_dataset(directory, "train", batch_size=16, shuffle=False)
            images = next(iter(unaugmented.epoch_fixed()))[0].astype(np.float64)
            assert np.allclose(images.mean(axis=(0, 2, 3)), 0.0, atol=1e-4), images.mean(axis=(0, 2, 3))
            return self.result(True, "Streams are seeded, complete and prefetch-stable", start_time)
        except AssertionError as e:
            return self.result(False, "Batch stream check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class PrefetchShutdownTest(TestPlugin):
    """Abandoning a prefetched epoch stops the producer even when it is blocked on a full queue."""

    operation = "load_dataset"
    description = "Prefetch thread exits when the consumer stops early"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(0)
            stream = BatchStream(rng.random((4, 3, 4, 4)), np.array([0, 1, 0, 1]), num_classes=2, batch_size=2,
                                 prefetch=True, prefetch_depth=1, name="early-stop")
            batches = stream.epoch(0)
            images, labels = next(batches)
            assert images.shape == (2, 3, 4, 4) and len(labels) == 2, images.shape
            time.sleep(0.3)  # producer fills the queue and blocks on the end marker
            batches.close()

            deadline = time.time() + 2.0
            alive = [t for t in threading.enumerate() if t.name == "prefetch-early-stop"]
            while alive and time.time() < deadline:
                time.sleep(0.05)
                alive = [t for t in alive if t.is_alive()]
            assert not alive, "prefetch thread still running after the consumer closed the epoch"

            full = list(stream.epoch(1))
            assert sum(len(batch_labels) for _, batch_labels in full) == 4, "full epoch lost examples"
            return self.result(True, "Producer thread exits after an early close", start_time)
        except AssertionError as e:
            return self.result(False, "Prefetch shutdown check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))
