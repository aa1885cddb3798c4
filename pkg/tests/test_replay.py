import numpy as np
import pytest
import torch

from slimdiff.errors import FormatError, UsageError
from slimdiff.floatstore import Slot, payload_bytes, read_store, write_store
from slimdiff.replay import (
    ReplayBuffer,
    ReplaySample,
    buffer_histogram_csv,
    class_quotas,
    compose_training_set,
    ingest_class,
    load_buffer,
    save_buffer,
)


def sample(cls, i=0, c=4, h=2, w=2):
    g = torch.Generator().manual_seed(cls * 100_003 + i)
    return ReplaySample(torch.randn(c, h, w, generator=g), cond_id=cls, source_class=cls, insertion_step=0)


def make_class(cls, n):
    return [sample(cls, i) for i in range(n)]


class TestIngest:
    def test_single_class_fill(self):
        buf = ingest_class(ReplayBuffer(capacity=100), make_class(0, 500), seed=1)
        assert len(buf) == 100
        assert buf.class_counts() == {0: 100}

    def test_two_class_split(self):
        buf = ingest_class(ReplayBuffer(capacity=100), make_class(0, 500), seed=1)
        buf = ingest_class(buf, make_class(1, 500), seed=2)
        assert buf.class_counts() == {0: 50, 1: 50}

    def test_three_class_quotas(self):
        assert class_quotas(10, (0, 1, 2)) == {0: 4, 1: 3, 2: 3}
        buf = ReplayBuffer(capacity=10)
        for cls in range(3):
            buf = ingest_class(buf, make_class(cls, 40), seed=cls)
        assert buf.class_counts() == {0: 4, 1: 3, 2: 3}

    def test_duplicate_class_rejected(self):
        buf = ingest_class(ReplayBuffer(capacity=10), make_class(0, 5), seed=0)
        with pytest.raises(UsageError):
            ingest_class(buf, make_class(0, 5), seed=1)

    def test_empty_class_rejected(self):
        with pytest.raises(UsageError):
            ingest_class(ReplayBuffer(capacity=10), [], seed=0)

    def test_mixed_class_rejected(self):
        data = make_class(0, 3) + make_class(1, 3)
        with pytest.raises(UsageError):
            ingest_class(ReplayBuffer(capacity=10), data, seed=0)

    def test_deterministic_given_seed(self):
        a = ingest_class(ReplayBuffer(capacity=7), make_class(0, 30), seed=9)
        b = ingest_class(ReplayBuffer(capacity=7), make_class(0, 30), seed=9)
        assert all(torch.equal(x.latent, y.latent) for x, y in zip(a.slots, b.slots))
        c = ingest_class(ReplayBuffer(capacity=7), make_class(0, 30), seed=10)
        assert any(not torch.equal(x.latent, y.latent) for x, y in zip(a.slots, c.slots))

    def test_input_buffer_unmodified(self):
        buf0 = ingest_class(ReplayBuffer(capacity=10), make_class(0, 20), seed=0)
        before = tuple(buf0.slots)
        ingest_class(buf0, make_class(1, 20), seed=1)
        assert buf0.slots == before

    def test_capacity_zero_keeps_buffer_empty(self):
        buf = ingest_class(ReplayBuffer(capacity=0), make_class(0, 10), seed=0)
        assert len(buf) == 0
        assert buf.ingested_classes == (0,)

    def test_randomized_sequences_respect_capacity_and_balance(self):
        # acceptance criterion: 1000 random ingest sequences
        rng = np.random.default_rng(2024)
        for trial in range(1000):
            cap = int(rng.integers(1, 30))
            n_classes = int(rng.integers(1, 6))
            buf = ReplayBuffer(capacity=cap)
            for cls in range(n_classes):
                # class sizes at least cap so every quota is fillable
                n = int(rng.integers(cap, cap + 40))
                data = [
                    ReplaySample(torch.zeros(1, 1, 1) + float(cls), cond_id=cls, source_class=cls)
                    for _ in range(n)
                ]
                buf = ingest_class(buf, data, seed=int(rng.integers(0, 2**31)))
                assert len(buf) <= cap
            counts = buf.class_counts()
            if counts:
                assert max(counts.values()) - min(counts.values()) <= 1

    def test_uniform_reservoir_capacity_and_determinism(self):
        buf = ReplayBuffer(capacity=12, policy="uniform_reservoir")
        for cls in range(4):
            buf = ingest_class(buf, make_class(cls, 25), seed=cls + 5)
            assert len(buf) <= 12
        again = ReplayBuffer(capacity=12, policy="uniform_reservoir")
        for cls in range(4):
            again = ingest_class(again, make_class(cls, 25), seed=cls + 5)
        assert all(torch.equal(a.latent, b.latent) for a, b in zip(buf.slots, again.slots))


class TestCompose:
    def test_cardinality(self):
        buf = ingest_class(ReplayBuffer(capacity=100), make_class(0, 200), seed=0)
        out = compose_training_set(make_class(1, 200), buf, seed=3)
        assert len(out) == 300

    def test_empty_buffer_is_permutation_of_current(self):
        cur = make_class(0, 17)
        out = compose_training_set(cur, ReplayBuffer(capacity=5), seed=1)
        assert len(out) == 17
        key = lambda s: s.latent.sum().item()
        assert sorted(map(key, out)) == pytest.approx(sorted(map(key, cur)))

    def test_label_multiset_preserved(self):
        buf = ingest_class(ReplayBuffer(capacity=10), make_class(0, 30), seed=0)
        cur = make_class(1, 20)
        out = compose_training_set(cur, buf, seed=2)
        labels = sorted(s.source_class for s in out)
        assert labels == [0] * 10 + [1] * 20


class TestSerialization:
    def make_buffer(self):
        buf = ReplayBuffer(capacity=9)
        for cls in range(3):
            buf = ingest_class(buf, make_class(cls, 20), seed=cls)
        return buf

    def test_roundtrip_bitwise(self, tmp_path):
        buf = self.make_buffer()
        p = tmp_path / "buffer.bin"
        save_buffer(buf, p)
        back = load_buffer(p)
        assert back.capacity == buf.capacity
        assert back.policy == buf.policy
        assert back.ingested_classes == buf.ingested_classes
        assert back.total_seen == buf.total_seen
        assert len(back.slots) == len(buf.slots)
        for a, b in zip(buf.slots, back.slots):
            assert a.latent.numpy().tobytes() == b.latent.numpy().tobytes()
            assert (a.cond_id, a.source_class, a.insertion_step) == (b.cond_id, b.source_class, b.insertion_step)

    def test_save_is_byte_stable(self, tmp_path):
        buf = self.make_buffer()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_buffer(buf, p1)
        save_buffer(buf, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected_atomically(self, tmp_path):
        p = tmp_path / "buffer.bin"
        save_buffer(self.make_buffer(), p)
        blob = p.read_bytes()
        for cut in (3, 10, len(blob) // 2, len(blob) - 1):
            p.write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                load_buffer(p)

    def test_version_mismatch_named(self, tmp_path):
        p = tmp_path / "buffer.bin"
        save_buffer(self.make_buffer(), p)
        blob = bytearray(p.read_bytes())
        blob[4] = 99  # version u16 little-endian low byte
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="99"):
            load_buffer(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "buffer.bin"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_buffer(p)

    def test_wrong_kind_rejected(self, tmp_path):
        p = tmp_path / "other.bin"
        write_store(p, {"kind": "feature_cache"}, [])
        with pytest.raises(FormatError):
            load_buffer(p)

    def test_latent_vs_pixel_payload_ratio(self, tmp_path):
        # default codec: factor 8, 4 latent channels vs 3 pixel channels
        n, hw = 20, 64
        latents = [
            ReplaySample(torch.rand(4, hw // 8, hw // 8), cond_id=0, source_class=0) for _ in range(n)
        ]
        buf = ingest_class(ReplayBuffer(capacity=n), latents, seed=0)
        lat_path = tmp_path / "latent.bin"
        save_buffer(buf, lat_path)
        pix_path = tmp_path / "pixel.bin"
        write_store(
            pix_path,
            {"kind": "pixel_buffer"},
            [Slot({"cond_id": 0, "source_class": 0, "insertion_step": i}, np.random.rand(3, hw, hw).astype("<f4")) for i in range(n)],
        )
        ratio = payload_bytes(lat_path) / payload_bytes(pix_path)
        assert ratio <= 1 / 48 + 1e-12
        # fixed framing overhead stays negligible next to the pixel payload
        overhead = lat_path.stat().st_size - payload_bytes(lat_path)
        assert overhead < 0.01 * pix_path.stat().st_size


class TestInspect:
    def test_histogram_csv(self):
        buf = ReplayBuffer(capacity=10)
        for cls in range(2):
            buf = ingest_class(buf, make_class(cls, 10), seed=cls)
        csv = buffer_histogram_csv(buf)
        assert csv == "source_class,count\n0,5\n1,5\n"
