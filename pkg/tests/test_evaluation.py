import math

import numpy as np
import pytest

from safa.corpus import SubtitleRecord, build_vocabulary
from safa.evaluation import (
    DecodeConfig,
    beam_decode,
    corpus_bleu,
    export_attention,
    hypothesis_score,
    read_attention_dump,
    variant_config,
    write_results_table,
)
from safa.model import ModelConfig, ModelParameters, TextBatch, VideoFeatureBatch, forward_full
from safa.training import Schedule, TrainConfig, make_batches, train


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_identity_is_100():
    sentences = ["the cat sat on the mat", "a b c d e"]
    assert corpus_bleu(sentences, sentences) == pytest.approx(100.0, abs=1e-9)


def test_bleu_identity_short_sentences():
    # sentences below length 4 leave the higher orders vacuous, not zero
    sentences = ["a b", "c"]
    assert corpus_bleu(sentences, sentences) == pytest.approx(100.0, abs=1e-9)


def test_bleu_empty_hypotheses():
    assert corpus_bleu(["", ""], ["a b", "c d"]) == 0.0
    assert corpus_bleu([], []) == 0.0


def test_bleu_hand_worksheet_zero_precision():
    # p3 has no matches: "the the the", "the the cat" vs "the cat sat"
    assert corpus_bleu(["the the the cat"], ["the cat sat"]) == 0.0


def test_bleu_hand_worksheet_full():
    # clipped precisions 5/6, 3/5, 2/4, 1/3; lengths equal so BP = 1
    expected = 100.0 * (5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25
    got = corpus_bleu(["the cat sat on the mat"], ["the cat sat on a mat"])
    assert got == pytest.approx(expected, abs=1e-6)


def test_bleu_brevity_penalty():
    # hypothesis shorter than reference: all precisions 1, BP = e^(1 - 6/4)
    got = corpus_bleu(["a b c d"], ["a b c d e f"])
    assert got == pytest.approx(100.0 * math.exp(1.0 - 6.0 / 4.0), abs=1e-9)


def test_bleu_permutation_invariant():
    hyps = ["the cat sat on the mat", "dogs bark at the moon", "x y z w"]
    refs = ["the cat sat on a mat", "dogs bark at a moon", "x y z q"]
    base = corpus_bleu(hyps, refs)
    perm = [2, 0, 1]
    assert corpus_bleu([hyps[i] for i in perm], [refs[i] for i in perm]) == pytest.approx(base, abs=1e-12)


def test_bleu_input_errors():
    with pytest.raises(ValueError, match="counts"):
        corpus_bleu(["a"], ["a", "b"])
    with pytest.raises(ValueError, match="reference"):
        corpus_bleu(["a"], [""])


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _overfit_model(pairs, seed=0, steps=150, frames=3, feature_dim=2):
    records = [
        SubtitleRecord(
            id=f"p{i}", source_text=s, target_text=t,
            start_ms=1000, end_ms=2000, video_id=f"p{i}",
        )
        for i, (s, t) in enumerate(pairs)
    ]
    features = {
        r.id: np.random.default_rng(i).normal(size=(frames, feature_dim))
        for i, r in enumerate(records)
    }
    src_vocab = build_vocabulary(records, "source", min_count=1)
    tgt_vocab = build_vocabulary(records, "target", min_count=1)
    cfg = ModelConfig(
        src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
        video_feature_dim=feature_dim, encoder_layers=1, decoder_layers=1,
        d_model=16, d_ffn=32, heads=2, dropout=0.0, label_smoothing=0.0,
        frames_per_clip=frames, frame_loss_weight=0.0, ambiguity_weight=1.0,
    )
    batches, _ = make_batches(records, src_vocab, tgt_vocab, 64, seed=seed)
    tc = TrainConfig(
        max_steps=steps, seed=seed, clip_norm=None,
        schedule=Schedule(warmup_steps=20, lr_start=1e-5, lr_peak=3e-3),
    )
    params = ModelParameters.build(cfg, seed=seed)
    result = train(params, cfg, batches, batches, features, tc)
    return result.params, cfg, records, features, src_vocab, tgt_vocab


def _decode_inputs(records, features, src_vocab):
    src_rows = [src_vocab.encode(r.source_text) for r in records]
    width = max(len(row) for row in src_rows)
    src = np.zeros((len(src_rows), width), dtype=np.int64)
    mask = np.zeros((len(src_rows), width), dtype=bool)
    for i, row in enumerate(src_rows):
        src[i, : len(row)] = row
        mask[i, : len(row)] = True
    feats = VideoFeatureBatch(np.stack([features[r.id] for r in records]))
    return src, mask, feats


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam_size=0)
    with pytest.raises(ValueError):
        DecodeConfig(max_length=0)


def test_beam_one_equals_greedy_rollout():
    params, cfg, records, features, src_vocab, tgt_vocab = _overfit_model(
        [("a b", "x"), ("c d", "y z")], steps=5
    )
    src, mask, feats = _decode_inputs(records, features, src_vocab)
    beam1 = beam_decode(params, cfg, src, mask, feats, DecodeConfig(beam_size=1, max_length=6))

    # independent greedy rollout
    from safa.corpus import BOS_ID, EOS_ID
    from safa.evaluation import _fuse_sources
    from safa.model import decode as model_decode

    fused, _ = _fuse_sources(src, mask, feats, params, cfg)
    for i in range(len(records)):
        ids = []
        for _ in range(6):
            prefix = np.array([[BOS_ID] + ids], dtype=np.int64)
            logits = model_decode(
                __import__("safa.tensor", fromlist=["Tensor"]).Tensor(fused.data[i][None]),
                prefix, np.ones_like(prefix, dtype=bool), mask[i][None], params, cfg,
            )
            token = int(np.argmax(logits.data[0, -1]))
            if token == EOS_ID:
                break
            ids.append(token)
        assert beam1[i] == ids


def test_overfit_model_reproduces_target_and_beam_property():
    params, cfg, records, features, src_vocab, tgt_vocab = _overfit_model(
        [("the small one", "il piccolo"), ("the big one", "il grande")], steps=200
    )
    src, mask, feats = _decode_inputs(records, features, src_vocab)
    hyps1 = beam_decode(params, cfg, src, mask, feats, DecodeConfig(beam_size=1, max_length=8))
    texts = [tgt_vocab.decode(h) for h in hyps1]
    assert texts == [r.target_text for r in records]

    hyps5 = beam_decode(params, cfg, src, mask, feats, DecodeConfig(beam_size=5, max_length=8))
    for i in range(len(records)):
        s1 = hypothesis_score(params, cfg, src[i][None], mask[i][None],
                              VideoFeatureBatch(feats.features[i][None]), hyps1[i])
        s5 = hypothesis_score(params, cfg, src[i][None], mask[i][None],
                              VideoFeatureBatch(feats.features[i][None]), hyps5[i])
        assert s5 >= s1 - 1e-12


def test_beam_decode_deterministic():
    params, cfg, records, features, src_vocab, _ = _overfit_model(
        [("a b", "x y"), ("c d", "z")], steps=10
    )
    src, mask, feats = _decode_inputs(records, features, src_vocab)
    dc = DecodeConfig(beam_size=3, max_length=5)
    assert beam_decode(params, cfg, src, mask, feats, dc) == beam_decode(params, cfg, src, mask, feats, dc)


# ---------------------------------------------------------------------------
# Ablation configs
# ---------------------------------------------------------------------------


def test_variant_configs():
    cfg = ModelConfig(src_vocab_size=8, tgt_vocab_size=8, video_feature_dim=4)
    baseline = variant_config(cfg, "baseline")
    assert baseline.frame_loss_weight == 0.0 and baseline.ambiguity_weight == 1.0
    no_frame = variant_config(cfg, "no_frame_loss")
    assert no_frame.frame_loss_weight == 0.0 and no_frame.ambiguity_weight == cfg.ambiguity_weight
    no_ambiguity = variant_config(cfg, "no_ambiguity_weight")
    assert no_ambiguity.ambiguity_weight == 1.0 and no_ambiguity.frame_loss_weight == cfg.frame_loss_weight
    with pytest.raises(ValueError):
        variant_config(cfg, "bogus")


def test_variants_share_initial_parameters():
    cfg = ModelConfig(
        src_vocab_size=8, tgt_vocab_size=8, video_feature_dim=4,
        encoder_layers=1, decoder_layers=1, d_model=8, d_ffn=16,
    )
    a = ModelParameters.build(variant_config(cfg, "full"), seed=3)
    b = ModelParameters.build(variant_config(cfg, "baseline"), seed=3)
    for name, t in a.items():
        np.testing.assert_array_equal(t.data, b[name].data)


def test_write_results_table(tmp_path):
    rows = [
        {"variant": "full", "bleu": 12.34567, "synthetic_accuracy": 0.91},
        {"variant": "baseline", "bleu": 10.0, "synthetic_accuracy": 0.82},
    ]
    path = tmp_path / "results.csv"
    write_results_table(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "variant,bleu,synthetic_accuracy"
    assert lines[1] == "full,12.3457,0.9100"


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------


def _export_setup(frames):
    cfg = ModelConfig(
        src_vocab_size=9, tgt_vocab_size=9, video_feature_dim=3,
        encoder_layers=1, decoder_layers=1, d_model=8, d_ffn=16,
        heads=2, dropout=0.0, frames_per_clip=frames,
    )
    params = ModelParameters.build(cfg, seed=6)
    rng = np.random.default_rng(6)
    src = rng.integers(4, 9, size=(2, 4))
    src_mask = np.array([[True, True, True, False], [True, True, True, True]])
    tgt = np.full((2, 3), 2, dtype=np.int64)
    tgt[:, -1] = 3
    batch = TextBatch(
        src=src, src_mask=src_mask, tgt=tgt,
        tgt_mask=np.ones((2, 3), dtype=bool), flags=np.zeros(2, dtype=bool),
    )
    feats = VideoFeatureBatch(rng.normal(size=(2, frames, 3)))
    return cfg, params, batch, feats


def test_export_attention_rows_and_bit_equality(tmp_path):
    cfg, params, batch, feats = _export_setup(frames=5)
    src_vocab = type("V", (), {"tokens": [f"tok{i}" for i in range(9)]})()
    path = tmp_path / "attn.jsonl"
    export_attention(params, cfg, batch, feats, src_vocab, path)
    dump = read_attention_dump(path)
    assert len(dump) == 2
    assert len(dump[0]["weights"]) == 3  # padding token dropped
    assert len(dump[1]["weights"]) == 4
    output, _ = forward_full(batch, feats, params, cfg)
    for i, record in enumerate(dump):
        rows = np.array(record["weights"])
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-6)
        keep = batch.src_mask[i]
        assert rows.tobytes() == output.frame_attention.data[i][keep].tobytes()
        np.testing.assert_allclose(record["frame_aggregate"], rows.mean(axis=0), atol=0)


def test_trained_attention_peaks_at_frame_nearest_gaussian_mean(tmp_path):
    # strong frame loss and a cold temperature make the target near one-hot
    # at the frame closest to the Gaussian mean (index 3 of 6 here); frames
    # carry an identity code so content attention can localize them at all
    from safa.corpus import build_vocabulary
    from safa.training import Schedule, TrainConfig, generate_synthetic_dataset, make_batches, train

    frames = 6
    records, _, flags = generate_synthetic_dataset(40, frames, 4, seed=2)
    rng = np.random.default_rng(0)
    dv = frames + 2
    features = {}
    for r in records:
        feat = np.zeros((frames, dv))
        feat[np.arange(frames), np.arange(frames)] = 1.0
        feat += 0.05 * rng.standard_normal((frames, dv))
        features[r.id] = feat
    src_vocab = build_vocabulary(records, "source", min_count=1)
    tgt_vocab = build_vocabulary(records, "target", min_count=1)
    cfg = ModelConfig(
        src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
        video_feature_dim=dv, encoder_layers=1, decoder_layers=1,
        d_model=16, d_ffn=32, heads=2, dropout=0.0, frames_per_clip=frames,
        frame_loss_weight=20.0, temperature=0.05,
    )
    batches, _ = make_batches(records, src_vocab, tgt_vocab, 256, seed=2, flags_by_id=flags)
    tc = TrainConfig(max_steps=300, seed=2, patience=10_000,
                     schedule=Schedule(warmup_steps=20, lr_start=1e-5, lr_peak=3e-3))
    result = train(ModelParameters.build(cfg, seed=2), cfg, batches, batches[:1], features, tc)

    batch = batches[0]
    feats = VideoFeatureBatch(np.stack([features[v] for v in batch.video_ids]))
    path = tmp_path / "attn.jsonl"
    export_attention(result.params, cfg, batch.text, feats, src_vocab, path)
    z = np.linspace(-3.0, 3.0, frames)
    nearest = int(np.argmin(np.abs(z - 1.0)))
    assert nearest == 3
    for record in read_attention_dump(path):
        assert int(np.argmax(record["frame_aggregate"])) == nearest


def test_export_attention_single_frame(tmp_path):
    cfg, params, batch, feats = _export_setup(frames=1)
    src_vocab = type("V", (), {"tokens": [f"tok{i}" for i in range(9)]})()
    path = tmp_path / "attn.jsonl"
    export_attention(params, cfg, batch, feats, src_vocab, path)
    for record in read_attention_dump(path):
        assert all(row == [1.0] for row in record["weights"])
