import math
import random

import numpy as np
import pytest
import torch

from latres.channel import ChannelConfig, Utterance, generate_corpus
from latres.errors import ConfigError, DataError, TrainingDivergedError
from latres.lattice import chain_lattice
from latres.model import (
    EncoderSpec,
    ModelConfig,
    RescoringModel,
    encode,
    expected_error_loss,
    load_checkpoint,
    mle_loss,
    mle_losses,
    mwer_loss,
    read_checkpoint_header,
    save_checkpoint,
    score_hypotheses,
    teacher_force_logprob,
    vocabulary_for,
)
from latres.neural import DTYPE, MechanismFlags
from latres.train import TrainSchedule, token_accuracy, train

import gradcheck

WORDS = [f"w{i}" for i in range(20)]


def val(t):
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def small_model(spec, seed=0, **kw):
    cfg = ModelConfig(embed_dim=8, encoder_units=8, audio_encoder_units=8, decoder_units=8, attention_heads=4,
                      feature_dim=4, seed=seed, **kw)
    return RescoringModel(cfg, spec, vocabulary_for(WORDS))


def chain_utterance(uid, tokens, rng):
    lat = chain_lattice(tokens, list(rng.uniform(0.0, 3.0, size=len(tokens))))
    feats = rng.normal(size=(3 * len(tokens), 4)).astype(np.float32)
    return Utterance(uid, list(tokens), lat, [(list(tokens), 1.0)], feats)


@pytest.fixture(scope="module")
def corpus():
    cfg = ChannelConfig(vocab_size=30, n_homophone_classes=6, feature_dim=4, seed=3)
    return generate_corpus(cfg, 60)


# -- config / spec ---------------------------------------------------------------


def test_presets():
    p = ModelConfig.large()
    assert (p.embed_dim, p.encoder_units, p.audio_encoder_units, p.decoder_units, p.decoder_layers,
            p.attention_heads, p.vocab_size) == (256, 256, 768, 256, 2, 4, 50_000)
    d = ModelConfig.desk()
    assert (d.embed_dim, d.encoder_units, d.audio_encoder_units, d.decoder_units, d.decoder_layers,
            d.attention_heads) == (32, 32, 48, 32, 2, 4)
    assert d.vocab_size <= 512


def test_dual_encoder_splits_heads():
    m = small_model(EncoderSpec("audio", companion="lattice"))
    assert m.attention["audio"].heads == 2 and m.attention["lattice"].heads == 2


@pytest.mark.parametrize(
    "kw",
    [
        dict(kind="bogus"),
        dict(kind="lattice", companion="lattice"),
        dict(kind="none", companion="audio"),
        dict(kind="lattice", companion="one_best"),
        dict(kind="n_best", n=0),
        dict(kind="lattice", lattice_nbest=0),
    ],
)
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        EncoderSpec(**kw)


def test_spec_round_trip_and_labels():
    spec = EncoderSpec("audio", companion="lattice", mechanisms="wcs,bfg,weo")
    assert EncoderSpec.from_dict(spec.to_dict()) == spec
    assert spec.label() == "Audio encoder & Full-lattice encoder [WCS + BFG + WEO]"
    assert EncoderSpec("lattice", mechanisms="", lattice_nbest=2).label() == "2-best lattice encoder [None (TreeLSTM)]"
    with pytest.raises(ConfigError):
        EncoderSpec.from_dict({"kind": "lattice", "depth": 3})


# -- encoders --------------------------------------------------------------------


def test_none_encoder_is_empty():
    m = small_model(EncoderSpec("none"))
    utt = chain_utterance("u", ["w1", "w2"], np.random.default_rng(0))
    assert encode(m, utt) == {}
    assert val(teacher_force_logprob(m, {}, ["w1", "w2"])) < 0


def test_nbest_with_one_equals_one_best():
    rng = np.random.default_rng(1)
    utt = Utterance("u", ["w1", "w2"], None, [(["w1", "w2"], 0.1), (["w3"], 0.5)])
    a = encode(small_model(EncoderSpec("one_best"), seed=4), utt)["one_best"]
    b = encode(small_model(EncoderSpec("n_best", n=1), seed=4), utt)["n_best"]
    assert torch.equal(a.keys, b.keys)
    del rng


def test_nbest_concatenates_positions():
    utt = Utterance("u", ["w1"], None, [(["w1", "w2", "w3"], 0.1), (["w4", "w5", "w6", "w7"], 0.5)])
    out = encode(small_model(EncoderSpec("n_best", n=5)), utt)["n_best"]
    # each hypothesis is wrapped in <s> ... </s>
    assert out.keys.shape[1] == (3 + 2) + (4 + 2)
    one = encode(small_model(EncoderSpec("one_best")), utt)["one_best"]
    assert torch.allclose(out.keys[0, :5], one.keys[0], rtol=0, atol=1e-12)


def test_missing_inputs_name_the_utterance():
    utt = Utterance("utt-42", ["w1"], None, [(["w1"], 0.0)], None)
    with pytest.raises(DataError, match="utt-42"):
        encode(small_model(EncoderSpec("lattice")), utt)
    with pytest.raises(DataError, match="utt-42"):
        encode(small_model(EncoderSpec("audio")), utt)


def test_unknown_tokens_map_to_unk():
    m = small_model(EncoderSpec("none"))
    lp = teacher_force_logprob(m, {}, ["w1", "never-seen"])
    assert math.isfinite(val(lp))
    assert m.unk_count == 1


@pytest.mark.parametrize("mechs", ["", "wcs", "wcs,bfg,weo", "wcs,bfg,batt", "wcs,bfg,batt,weo"])
def test_chain_lattice_equals_one_best(mechs):
    rng = np.random.default_rng(7)
    lat_m = small_model(EncoderSpec("lattice", mechanisms=mechs), seed=5)
    one_m = small_model(EncoderSpec("one_best"), seed=5)
    for k in range(10):
        toks = list(rng.choice(WORDS, size=int(rng.integers(1, 8))))
        utt = chain_utterance(f"c{k}", toks, rng)
        a = encode(lat_m, utt)["lattice"]
        b = encode(one_m, utt)["one_best"]
        assert torch.allclose(a.keys, b.keys, rtol=0, atol=1e-9)
        sa = teacher_force_logprob(lat_m, {"lattice": a}, toks)
        sb = teacher_force_logprob(one_m, {"one_best": b}, toks)
        assert abs(val(sa) - val(sb)) < 1e-9


def test_batched_lattice_encoder_matches_reference(corpus):
    from latres.neural import encode_node_lattice

    m = small_model(EncoderSpec("lattice", mechanisms="wcs,bfg,batt,weo"), seed=2)
    m2 = RescoringModel(m.config, m.spec, vocabulary_for(corpus.vocab))
    utts = corpus["train"][:8]
    preps = [m2.prepare(u) for u in utts]
    out = m2.encode(preps)["lattice"]
    for b, prep in enumerate(preps):
        H, values, bias = encode_node_lattice(m2.text_lstm, m2.store["text.embed"], prep.lattice_ids, prep.lattice,
                                              m2.spec.mechanisms)
        n = len(prep.lattice.nodes)
        assert torch.allclose(out.keys[b, :n], values, atol=1e-12)
        assert torch.allclose(out.bias[b, :n], bias, atol=1e-12)


# -- scores and losses -----------------------------------------------------------


def test_untrained_logprob_near_uniform():
    m = RescoringModel(ModelConfig(seed=0), EncoderSpec("none"), vocabulary_for([f"t{i}" for i in range(200)]))
    V = len(m.vocab)
    for L in (2, 5, 9):
        lp = val(teacher_force_logprob(m, {}, [f"t{i}" for i in range(L)]))
        expect = -(L + 1) * math.log(V)
        assert lp < 0
        assert abs(lp - expect) < 0.2 * abs(expect)


def test_scores_independent_of_other_hypotheses(corpus):
    m = RescoringModel(ModelConfig(seed=1, feature_dim=4), EncoderSpec("one_best"), vocabulary_for(corpus.vocab))
    rng = random.Random(0)
    for u in corpus["dev"]:
        if len(u.nbest) < 3:
            continue
        base = {tuple(h.tokens): h.rescore_logprob for h in score_hypotheses(m, [u])[0]}
        shuffled = [u.nbest[0]] + rng.sample(u.nbest[1:], len(u.nbest) - 1)
        m.clear_cache()
        v = Utterance(u.id, u.ref, u.lattice, shuffled, u.features)
        again = {tuple(h.tokens): h.rescore_logprob for h in score_hypotheses(m, [v])[0]}
        m.clear_cache()
        assert again == base


def test_batch_padding_does_not_change_scores(corpus):
    m = RescoringModel(ModelConfig(seed=1, feature_dim=4), EncoderSpec("audio", companion="lattice"),
                       vocabulary_for(corpus.vocab))
    utts = corpus["dev"]
    alone = [score_hypotheses(m, [u])[0] for u in utts]
    batched = score_hypotheses(m, utts, batch_size=64)
    for a, b in zip(alone, batched):
        for x, y in zip(a, b):
            assert abs(x.rescore_logprob - y.rescore_logprob) < 1e-9


def test_mle_is_mean_token_cross_entropy(corpus):
    m = RescoringModel(ModelConfig(seed=2, feature_dim=4), EncoderSpec("lattice"), vocabulary_for(corpus.vocab))
    for u in corpus["train"][:5]:
        prep = m.prepare(u)
        loss = mle_loss(m, u)
        logits, tgt, mask, _ = m.decoder_logits(m.encode([prep]), [prep.ref], [0])
        ce = torch.nn.functional.cross_entropy(logits[0], tgt[0], reduction="sum")
        assert val(loss) >= 0
        assert val(loss) == pytest.approx(val(ce) / len(u.ref), rel=1e-12)


def test_mle_rejects_empty_reference():
    m = small_model(EncoderSpec("none"))
    with pytest.raises(DataError):
        mle_loss(m, Utterance("e", [], None, [(["w1"], 0.0)]))


def test_expected_error_examples():
    half = torch.log(torch.tensor([0.5, 0.5], dtype=DTYPE))
    errs = torch.tensor([0.0, 2.0], dtype=DTYPE)
    assert val(expected_error_loss(half, errs)) == pytest.approx(0.0, abs=1e-15)
    skew = torch.log(torch.tensor([0.9, 0.1], dtype=DTYPE))
    assert val(expected_error_loss(skew, errs)) == pytest.approx(-0.8, abs=1e-12)
    lp = torch.randn(5, dtype=DTYPE)
    assert val(expected_error_loss(lp, torch.full((5,), 3.0, dtype=DTYPE))) == pytest.approx(0.0, abs=1e-12)


def test_expected_error_translation_invariant():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        lp = torch.randn(5, generator=g, dtype=DTYPE)
        e = torch.randint(0, 6, (5,), generator=g).to(DTYPE)
        assert val(expected_error_loss(lp, e)) == pytest.approx(val(expected_error_loss(lp, e + 7.0)), abs=1e-12)


def test_mwer_skips_single_hypothesis():
    m = small_model(EncoderSpec("none"))
    assert val(mwer_loss(m, Utterance("s", ["w1"], None, [(["w1"], 0.0)]))) == 0.0


@pytest.mark.parametrize(
    "spec",
    [
        EncoderSpec("none"),
        EncoderSpec("one_best"),
        EncoderSpec("n_best", n=2),
        EncoderSpec("lattice", mechanisms="wcs,bfg,batt,weo"),
        EncoderSpec("audio", companion="lattice", mechanisms=""),
    ],
    ids=lambda s: s.label(),
)
@pytest.mark.parametrize("which", ["mle", "mwer"])
def test_loss_gradients(spec, which):
    for seed in range(2):
        assert gradcheck.model_loss_error(seed, spec, which) < 1e-4


# -- training and checkpoints ----------------------------------------------------


def test_zero_epochs_leaves_model_unchanged(corpus, tmp_path):
    m = RescoringModel(ModelConfig(seed=3, feature_dim=4), EncoderSpec("lattice"), vocabulary_for(corpus.vocab))
    before = m.state()
    log = train(m, corpus["train"], TrainSchedule(mle_epochs=0, mwer_epochs=0), out_dir=tmp_path)
    assert log == []
    after = m.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


@pytest.fixture(scope="module")
def overfit_set():
    cfg = ChannelConfig(vocab_size=30, n_homophone_classes=6, feature_dim=4, seed=5)
    ds = generate_corpus(cfg, 60)
    return ds.all()[:50], vocabulary_for(ds.vocab)


def test_full_batch_loss_keeps_decreasing(overfit_set):
    utts, vocab = overfit_set
    m = RescoringModel(ModelConfig(seed=0, feature_dim=4), EncoderSpec("one_best"), vocab)
    sched = TrainSchedule(mle_epochs=80, mwer_epochs=0, batch_size=50, lr=0.01, decay_start=1000, seed=0)
    losses = [r["train_loss"] for r in train(m, utts, sched)]
    warm = 10
    drops = sum(b < a for a, b in zip(losses[warm:], losses[warm + 1 :]))
    assert drops >= 0.95 * (len(losses) - warm - 1)


def test_overfit_small_set(overfit_set):
    utts, vocab = overfit_set
    m = RescoringModel(ModelConfig(seed=0, feature_dim=4), EncoderSpec("one_best"), vocab)
    train(m, utts, TrainSchedule(mle_epochs=100, mwer_epochs=0, batch_size=10, lr=0.02, decay_start=1000, seed=0))
    assert token_accuracy(m, utts) > 0.9


def test_training_is_deterministic(corpus):
    sched = TrainSchedule(mle_epochs=1, mwer_epochs=1, batch_size=8, seed=4)
    states = []
    for _ in range(2):
        m = RescoringModel(ModelConfig(seed=1, feature_dim=4), EncoderSpec("lattice"), vocabulary_for(corpus.vocab))
        train(m, corpus["train"], sched)
        states.append(m.state())
    assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])


def test_divergence_restores_last_good(corpus, tmp_path):
    utts = [Utterance(u.id, u.ref, u.lattice, u.nbest, np.full_like(u.features, np.nan)) for u in corpus["train"]]
    m = RescoringModel(ModelConfig(seed=1, feature_dim=4), EncoderSpec("audio"), vocabulary_for(corpus.vocab))
    before = m.state()
    with pytest.raises(TrainingDivergedError) as err:
        train(m, utts, TrainSchedule(mle_epochs=1, mwer_epochs=0), out_dir=tmp_path)
    assert err.value.checkpoint == str(tmp_path / "last_good.ckpt")
    restored = load_checkpoint(tmp_path / "last_good.ckpt").state()
    assert all(np.array_equal(before[k], restored[k]) for k in before)


def test_training_writes_phase_checkpoints_and_metrics(corpus, tmp_path):
    m = RescoringModel(ModelConfig(seed=1, feature_dim=4), EncoderSpec("one_best"), vocabulary_for(corpus.vocab))
    train(m, corpus["train"], TrainSchedule(mle_epochs=2, mwer_epochs=1, batch_size=16), dev_utts=corpus["dev"],
          out_dir=tmp_path)
    assert (tmp_path / "mle.ckpt").is_file() and (tmp_path / "mwer.ckpt").is_file()
    rows = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 3
    assert all("dev_loss" in r and "train_loss" in r for r in rows)


def test_checkpoint_round_trip_exact(corpus, tmp_path):
    m = RescoringModel(ModelConfig(seed=9, feature_dim=4), EncoderSpec("audio", companion="lattice", mechanisms="wcs,batt"),
                       vocabulary_for(corpus.vocab))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, {"note": "x"})
    header = read_checkpoint_header(path)
    assert header["config"] == m.config.to_dict()
    assert header["encoder"] == m.spec.to_dict()
    assert header["extra"] == {"note": "x"}
    m2 = load_checkpoint(path)
    assert m2.spec.mechanisms == MechanismFlags(wcs=True, batt=True)
    s1, s2 = m.state(), m2.state()
    assert list(s1) == list(s2)
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)
    a = score_hypotheses(m, corpus["dev"])
    b = score_hypotheses(m2, corpus["dev"])
    assert a == b


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_parallel_scoring_matches_serial(corpus):
    m = RescoringModel(ModelConfig(seed=1, feature_dim=4), EncoderSpec("lattice"), vocabulary_for(corpus.vocab))
    utts = corpus.all()
    assert score_hypotheses(m, utts, batch_size=8, jobs=2) == score_hypotheses(m, utts, batch_size=8)


def test_mle_losses_batch_matches_single(corpus):
    m = RescoringModel(ModelConfig(seed=1, feature_dim=4), EncoderSpec("n_best", n=3), vocabulary_for(corpus.vocab))
    utts = corpus["train"][:6]
    batch = mle_losses(m, [m.prepare(u) for u in utts])
    for u, v in zip(utts, batch):
        assert val(mle_loss(m, u)) == pytest.approx(val(v), abs=1e-10)
