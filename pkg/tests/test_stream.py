import json
import logging
import struct
from itertools import combinations

import numpy as np
import pytest

from histpt import rng
from histpt.errors import ConfigurationError, ParseError
from histpt.stream import (
    DomainSpec,
    Stream,
    StreamConfig,
    default_domain_specs,
    fixed_order_stream,
    generate_class_prototypes,
    generate_stream,
    load_embedding_stream,
    write_embedding_jsonl,
    write_embedding_stream,
)


def cosines(p):
    return [abs(p[i] @ p[j]) for i, j in combinations(range(len(p)), 2)]


class TestRng:
    def test_same_key_same_draws(self):
        a = rng.generator(5, "x", 1, 2).standard_normal(4)
        b = rng.generator(5, "x", 1, 2).standard_normal(4)
        np.testing.assert_array_equal(a, b)

    def test_tag_and_index_separate_streams(self):
        base = rng.generator(5, "x", 1).standard_normal(4)
        assert not np.array_equal(base, rng.generator(5, "y", 1).standard_normal(4))
        assert not np.array_equal(base, rng.generator(5, "x", 2).standard_normal(4))

    def test_known_draw_is_stable(self):
        # Pins the generator so a numpy or hashing change cannot silently alter streams.
        # Values frozen from a first run; crc32 is independently checkable with zlib.
        assert rng.tag_key("stream.order") == 0x7A3FA897
        assert rng.generator(42, "stream.order", 0).permutation(3).tolist() == [1, 0, 2]
        assert rng.generator(42, "x", 1).standard_normal() == -1.1792681725100191


class TestPrototypes:
    def test_deterministic(self):
        np.testing.assert_array_equal(generate_class_prototypes(10, 32, 3),
                                      generate_class_prototypes(10, 32, 3))

    def test_tiny_space(self):
        p = generate_class_prototypes(2, 2, 0, cap=0.5)
        assert max(cosines(p)) < 0.5
        np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0)

    def test_forty_five_pairs(self):
        p = generate_class_prototypes(10, 64, 42)
        cs = cosines(p)
        assert len(cs) == 45 and max(cs) < 0.5

    def test_unsatisfiable(self):
        with pytest.raises(ConfigurationError, match="D_img"):
            generate_class_prototypes(20, 2, 0, cap=0.1, max_tries=50)

    def test_needs_two_classes(self):
        with pytest.raises(ConfigurationError):
            StreamConfig(n_classes=1)


def identity_config(**kw):
    d = kw.pop("dim", 8)
    spec = DomainSpec(np.eye(d), np.zeros(d), 0.0, "clean")
    return StreamConfig(n_classes=4, dim=d, samples_per_domain=kw.pop("n", 30),
                        domain_specs=kw.pop("specs", [spec]), runs=kw.pop("runs", 1), seed=kw.pop("seed", 1))


class TestGeneration:
    def test_noiseless_identity_domain(self):
        cfg = identity_config()
        s = generate_stream(cfg, 0)
        np.testing.assert_array_equal(s.features, cfg.prototypes[s.classes])

    def test_length(self):
        cfg = StreamConfig(samples_per_domain=17, runs=2)
        assert len(generate_stream(cfg, 1)) == cfg.n_domains * 17

    def test_orders_vary_across_runs(self):
        cfg = StreamConfig(samples_per_domain=5, runs=8)
        orders = {tuple(generate_stream(cfg, r).domain_segments()) for r in range(8)}
        assert len(orders) > 1
        assert all(sorted(o) == [0, 1, 2] for o in orders)

    def test_same_run_same_stream(self):
        cfg = StreamConfig(samples_per_domain=20)
        a, b = generate_stream(cfg, 3), generate_stream(cfg, 3)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.classes, b.classes)

    def test_samples_are_shuffled_within_domain(self):
        s = generate_stream(StreamConfig(samples_per_domain=200), 0)
        assert len(s.domain_segments()) == 3
        assert not np.all(np.diff(s.classes[:200]) >= 0)

    def test_class_balance(self):
        cfg = StreamConfig(samples_per_domain=2000, runs=2)
        classes = np.concatenate([generate_stream(cfg, r).classes for r in range(2)])
        n, c = len(classes), cfg.n_classes
        counts = np.bincount(classes, minlength=c)
        sd = np.sqrt(n * (1 / c) * (1 - 1 / c))
        assert n >= 10_000 and np.all(np.abs(counts - n / c) < 5 * sd)

    def test_sample_view(self):
        s = generate_stream(StreamConfig(samples_per_domain=3), 0)
        item = s[4]
        assert item.index == 4 and item.domain_id == s.domains[4]
        assert 0 <= item.true_class < 10 and np.all(np.isfinite(item.raw_feature))
        assert len(list(s)) == len(s)


class TestFixedOrder:
    def test_reverse(self):
        cfg = StreamConfig(samples_per_domain=10)
        assert fixed_order_stream(cfg, [0, 1, 2]).domain_segments() == [0, 1, 2]
        assert fixed_order_stream(cfg, [2, 1, 0]).domain_segments() == [2, 1, 0]

    def test_single_domain(self):
        s = fixed_order_stream(StreamConfig(samples_per_domain=10), [1])
        assert set(s.domains.tolist()) == {1}

    def test_five_stage_protocol(self):
        specs = default_domain_specs(16, 0, generate_class_prototypes(10, 16, 0), n_domains=5)
        cfg = StreamConfig(dim=16, samples_per_domain=10, domain_specs=specs)
        assert fixed_order_stream(cfg, [0, 1, 2, 3, 4]).domain_segments() == [0, 1, 2, 3, 4]

    def test_repeats_draw_fresh_samples(self):
        s = fixed_order_stream(StreamConfig(samples_per_domain=10), [1, 0, 1])
        assert not np.array_equal(s.features[:10], s.features[20:])

    def test_unknown_domain(self):
        with pytest.raises(ConfigurationError, match="domain id 7"):
            fixed_order_stream(StreamConfig(samples_per_domain=10), [0, 7])


class TestDomainSpecs:
    def test_conditioning_enforced(self):
        bad = DomainSpec(np.diag([1.0, 1e-4]), np.zeros(2), 0.1, "squashed")
        with pytest.raises(ConfigurationError, match="condition"):
            StreamConfig(n_classes=2, dim=2, domain_specs=[bad])

    def test_default_domains_are_rotations(self):
        for spec in StreamConfig().domain_specs:
            assert np.linalg.cond(spec.transform) == pytest.approx(1.0, abs=1e-9)

    def test_negative_noise(self):
        with pytest.raises(ConfigurationError):
            DomainSpec(np.eye(2), np.zeros(2), -0.1)


def random_stream(n=1000, d=12, c=7, seed=0):
    g = np.random.default_rng(seed)
    feats = g.standard_normal((n, d)).astype(np.float32).astype(np.float64)
    return Stream(feats, g.integers(0, 3, n), g.integers(0, c, n), c)


class TestEmbeddingFiles:
    def test_binary_round_trip_is_bit_exact(self, tmp_path):
        s = random_stream()
        write_embedding_stream(tmp_path / "s.bin", s)
        back = load_embedding_stream(tmp_path / "s.bin")
        assert back.features.tobytes() == s.features.tobytes()
        np.testing.assert_array_equal(back.classes, s.classes)
        np.testing.assert_array_equal(back.domains, s.domains)
        assert back.n_classes == 7

    def test_three_records(self, tmp_path):
        write_embedding_stream(tmp_path / "s.bin", random_stream(3, 4))
        s = load_embedding_stream(tmp_path / "s.bin")
        assert len(s) == 3 and s.dim == 4

    def test_jsonl_matches_binary(self, tmp_path):
        s = random_stream(200)
        write_embedding_stream(tmp_path / "s.bin", s)
        write_embedding_jsonl(tmp_path / "s.jsonl", s)
        a = load_embedding_stream(tmp_path / "s.bin")
        b = load_embedding_stream(tmp_path / "s.jsonl", n_classes=7)
        assert a.features.tobytes() == b.features.tobytes()
        np.testing.assert_array_equal(a.classes, b.classes)

    def test_empty_file_warns(self, tmp_path, caplog):
        write_embedding_stream(tmp_path / "e.bin", random_stream(0))
        with caplog.at_level(logging.WARNING):
            s = load_embedding_stream(tmp_path / "e.bin")
        assert len(s) == 0 and "no records" in caplog.text

    def test_truncated_record_reports_offset(self, tmp_path):
        write_embedding_stream(tmp_path / "s.bin", random_stream(5, 4))
        data = (tmp_path / "s.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-3])
        with pytest.raises(ParseError, match="byte offset"):
            load_embedding_stream(tmp_path / "t.bin")

    def test_bad_version(self, tmp_path):
        header = struct.pack("<4sHIIQ", b"HTPT", 9, 2, 4, 0)
        (tmp_path / "v.bin").write_bytes(header)
        with pytest.raises(ParseError, match="version"):
            load_embedding_stream(tmp_path / "v.bin")

    def test_class_out_of_range(self, tmp_path):
        header = struct.pack("<4sHIIQ", b"HTPT", 1, 2, 1, 1)
        (tmp_path / "c.bin").write_bytes(header + struct.pack("<IIf", 5, 0, 1.0))
        with pytest.raises(ConfigurationError, match="class 5"):
            load_embedding_stream(tmp_path / "c.bin")

    def test_declared_class_count_mismatch(self, tmp_path):
        write_embedding_stream(tmp_path / "s.bin", random_stream(5, 4))
        with pytest.raises(ConfigurationError):
            load_embedding_stream(tmp_path / "s.bin", n_classes=3)

    def test_jsonl_dimension_mismatch(self, tmp_path):
        lines = [{"class": 0, "domain": 0, "feature": [1, 2]},
                 {"class": 1, "domain": 0, "feature": [1, 2, 3]}]
        (tmp_path / "d.jsonl").write_text("\n".join(json.dumps(x) for x in lines))
        with pytest.raises(ConfigurationError, match="byte offset"):
            load_embedding_stream(tmp_path / "d.jsonl")

    def test_jsonl_malformed(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"class": 0, "domain": 0, "feature": [1]}\n{oops\n')
        with pytest.raises(ParseError, match="byte offset 42"):
            load_embedding_stream(tmp_path / "m.jsonl")
