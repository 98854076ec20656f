"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with `-v -s` to see the per-criterion lines. The training-heavy
criteria (4, 5, 6) take a few minutes combined on one core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import playercap.captioner as cap
from playercap.captioner import (
    BOS,
    EOS,
    DecoderBatch,
    MultimodalPrompt,
    Vocabulary,
    caption_loss,
    decoder_forward,
    generate,
    init_decoder_params,
    init_prompt_params,
)
from playercap.cli import main, run_ablation_suite
from playercap.config import HyperConfig
from playercap.data import (
    Checkpoint,
    SynthConfig,
    build_player_centric_set,
    default_split,
    load_checkpoint,
    save_checkpoint,
    split_by_game,
    synth_generate,
)
from playercap.identity import (
    PlayerCatalog,
    PlayerSequence,
    bsim_forward,
    init_bsim_params,
    init_pin_params,
    pin_loss,
    encode_player_sequence,
)
from playercap.context import init_vclm_params, vclm_forward
from playercap.metrics import bleu, lcs_length, meteor, rouge_l, tokenize
from playercap.nn import (
    ParameterStore,
    grad_check,
    init_attention,
    init_layer_norm,
    layer_norm_p,
    mca_attn,
    msa,
)
from playercap.pipeline import (
    FULL,
    AblationFlags,
    caption_target_ids,
    clip_prompt,
    generate_captions,
    init_model,
    train_captioner,
    train_pin,
)
from playercap.tensor import Tensor, backward, mul, sum_all

from oracles import bsim_ref, enumerate_sequences, vclm_ref

TINY = HyperConfig(d_time=8, d_down=4, d_llm=8, n_q=2, n_heads=2,
                   dropout_rate=0.0, max_caption_len=12)

GRAD_TOL = 1e-4          # criterion 1
FIDELITY_TOL = 1e-12     # criterion 2
METRIC_TOL = 1e-9        # criterion 3

# criterion 6 training configuration (tuned once, then frozen)
ABLATION_SYNTH = dict(seed=0)
ABLATION_EPOCHS = 60
ABLATION_LR = 3e-3
ABLATION_BATCH = 16
ABLATION_MARGIN = 2.0


def _report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion} failed: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_1_gradient_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    worst: dict[str, float] = {}

    store = ParameterStore()
    init_attention(store, "m", TINY.d_time, rng)
    x = Tensor(rng.normal(size=(4, TINY.d_time)))
    worst["msa"] = grad_check(
        lambda: sum_all(mul(msa(x, store, "m", TINY.n_heads),
                            msa(x, store, "m", TINY.n_heads))), store)

    store = ParameterStore()
    init_attention(store, "c", TINY.d_time, rng)
    x2 = Tensor(rng.normal(size=(3, TINY.d_time)))
    worst["mca_attn"] = grad_check(
        lambda: sum_all(mul(mca_attn(x, x2, store, "c", TINY.n_heads),
                            mca_attn(x, x2, store, "c", TINY.n_heads))), store)

    store = ParameterStore()
    init_layer_norm(store, "ln", TINY.d_time)
    worst["layer_norm"] = grad_check(
        lambda: sum_all(mul(layer_norm_p(x, store, "ln"),
                            layer_norm_p(x, store, "ln"))), store)

    store = ParameterStore()
    init_bsim_params(store, TINY, rng)
    v_v = Tensor(rng.normal(size=(3, TINY.d_time)))
    f_k = Tensor(rng.normal(size=(2, TINY.d_time)))

    def bsim_loss():
        out = bsim_forward(v_v, f_k, store, TINY, "infer")
        return sum_all(mul(out.v_bsi, out.v_bsi)) + sum_all(
            mul(out.f_bsi, out.f_bsi))

    worst["bsim_forward"] = grad_check(bsim_loss, store)

    store = ParameterStore()
    init_vclm_params(store, TINY, rng)
    worst["vclm_forward"] = grad_check(
        lambda: sum_all(mul(vclm_forward(v_v, store, TINY),
                            vclm_forward(v_v, store, TINY))), store)

    vocab = Vocabulary.from_tokens(("run", "hop", "sit"))
    store = ParameterStore()
    init_prompt_params(store, TINY, rng)
    init_decoder_params(store, TINY, vocab.size, rng)
    rows = Tensor(rng.normal(size=(3, TINY.d_llm)))
    prompt = MultimodalPrompt(rows, (("video", 0, 3),))
    targets = (BOS, vocab.id("run"), vocab.id("hop"), EOS)
    worst["decoder+caption_loss"] = grad_check(
        lambda: caption_loss(DecoderBatch(prompt, targets), store, TINY), store)

    store = ParameterStore()
    init_pin_params(store, TINY, 5, 3, rng)
    seq = PlayerSequence(Tensor(rng.normal(size=(3, 5))))

    def pin_loss_fn():
        feat = encode_player_sequence(seq, store, TINY)
        return pin_loss([(feat, 1)], store, 3)

    worst["pin_loss"] = grad_check(pin_loss_fn, store)

    elapsed = time.monotonic() - t0
    peak = max(worst.values())
    ok = peak <= GRAD_TOL and elapsed < 60.0
    detail = ("max rel err %.2e across %s; %.1f s"
              % (peak, ",".join(worst), elapsed))
    _report("1 gradient-suite", ok, detail)


# ---------------------------------------------------------------------------
# 2. equation fidelity


def test_criterion_2_equation_fidelity():
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(20):
        cfg = HyperConfig(d_time=8, d_down=4, d_llm=8, n_q=2,
                          n_heads=1 if trial % 2 else 2, dropout_rate=0.0)
        store = ParameterStore()
        init_bsim_params(store, cfg, np.random.default_rng(300 + trial))
        v_v = rng.normal(size=(int(rng.integers(2, 6)), 8))
        f_k = rng.normal(size=(int(rng.integers(1, 4)), 8))
        out = bsim_forward(Tensor(v_v), Tensor(f_k), store, cfg, "infer")
        p = {n: t.data for n, t in store.items()}
        want_v, want_f = bsim_ref(v_v, f_k, p, cfg.n_heads)
        worst = max(worst,
                    float(np.max(np.abs(out.v_bsi.data - want_v))),
                    float(np.max(np.abs(out.f_bsi.data - want_f))))
    for trial in range(20):
        cfg = HyperConfig(d_time=4, d_down=4, d_llm=4, n_q=2, n_heads=1,
                          dropout_rate=0.0)
        store = ParameterStore()
        init_vclm_params(store, cfg, np.random.default_rng(400 + trial))
        v_v = rng.normal(size=(int(rng.integers(1, 7)), 4))
        out = vclm_forward(Tensor(v_v), store, cfg)
        p = {n: t.data for n, t in store.items()}
        worst = max(worst, float(np.max(np.abs(out.data - vclm_ref(v_v, p)))))
    _report("2 equation-fidelity", worst <= FIDELITY_TOL,
            f"max abs dev {worst:.2e} over 40 instances")


# ---------------------------------------------------------------------------
# 3. metric oracles


def test_criterion_3_metric_oracles():
    checks = []
    same = tokenize("t. jones makes 2-pt jump shot from 6 ft")
    checks.append(abs(bleu(same, [same]) - 1.0))
    checks.append(abs(rouge_l(same, same) - 1.0))
    checks.append(abs(bleu(["the", "cat"], [["the", "cat", "sat"]], n_max=2)
                      - math.exp(-0.5)))
    checks.append(abs(rouge_l(tokenize("the cat sat"),
                              tokenize("the cat sat on the mat")) - 2.0 / 3.0))
    checks.append(abs(meteor(tokenize("player makes layup"),
                             tokenize("player makes layup"))
                      - 0.9814814814814815))
    checks.append(0.0 if bleu([], [["a"]]) == 0.0 else 1.0)
    checks.append(0.0 if meteor(["a"], ["b"]) == 0.0 else 1.0)
    worst = max(checks)

    rng = np.random.default_rng(2)
    vocab = list("abcd")
    dp_ok = True
    import itertools

    def brute(a, b):
        for n in range(min(len(a), len(b)), 0, -1):
            for combo in itertools.combinations(range(len(a)), n):
                sub = [a[i] for i in combo]
                it = iter(b)
                if all(tok in it for tok in sub):
                    return n
        return 0

    for _ in range(500):
        a = list(rng.choice(vocab, size=rng.integers(1, 9)))
        b = list(rng.choice(vocab, size=rng.integers(1, 9)))
        if lcs_length(a, b) != brute(a, b):
            dp_ok = False
            break
    ok = worst <= METRIC_TOL and dp_ok
    _report("3 metric-oracles", ok,
            f"hand-value dev {worst:.2e}; 500-pair LCS {'ok' if dp_ok else 'bad'}")


# ---------------------------------------------------------------------------
# 4. identification end-to-end


def test_criterion_4_pin_end_to_end(tmp_path):
    t0 = time.monotonic()
    data = tmp_path / "pin_corpus.jsonl"
    # 40 games x 13 clips x ~1.3 names / 16 players ~= 40 sequences each
    assert main(["synth", "--out", str(data), "--seed", "0",
                 "--n-games", "40", "--clips-per-game", "13",
                 "--n-players", "16", "--noise-sigma", "0.1"]) == 0
    ckpt_path = tmp_path / "pin.ckpt"
    assert main(["train-pin", "--data", data.as_posix(),
                 "--out", str(ckpt_path), "--seed", "0", "--epochs", "50",
                 "--lr", "3e-3", "--early-stop-mca", "0.97"]) == 0
    ckpt = load_checkpoint(ckpt_path)
    last = ckpt.meta["history"][-1]
    elapsed = time.monotonic() - t0
    ok = (last["mca"] >= 0.95 and last["mpca"] >= 0.90
          and last["epoch"] <= 50 and elapsed < 300.0)
    _report("4 pin-end-to-end", ok,
            "mca %.3f mpca %.3f at epoch %d; %.0f s"
            % (last["mca"], last["mpca"], last["epoch"], elapsed))


# ---------------------------------------------------------------------------
# 5. captioner overfit


def test_criterion_5_captioner_overfit(tmp_path):
    t0 = time.monotonic()
    data = tmp_path / "overfit_corpus.jsonl"
    assert main(["synth", "--out", str(data), "--seed", "0",
                 "--n-games", "4", "--clips-per-game", "16",
                 "--n-players", "8"]) == 0
    pin = tmp_path / "pin.ckpt"
    assert main(["train-pin", "--data", str(data), "--out", str(pin),
                 "--seed", "0", "--epochs", "10", "--lr", "3e-3",
                 "--split", "all", "--early-stop-mca", "0.99"]) == 0
    cap_path = tmp_path / "cap.ckpt"
    assert main(["train-captioner", "--data", str(data), "--out",
                 str(cap_path), "--pin-checkpoint", str(pin), "--seed", "0",
                 "--epochs", "100", "--lr", "2e-3", "--split", "all",
                 "--early-stop-reconstruction", "0.95"]) == 0
    ckpt = load_checkpoint(cap_path)
    hist = ckpt.meta["history"]
    rate = hist[-1].get("reconstruction", 0.0)
    epoch = hist[-1]["epoch"]
    train_time = time.monotonic() - t0

    # decode speed on the trained model
    model = init_model(ckpt.hyper, ckpt.catalog, ckpt.vocab,
                       int(ckpt.meta["d_in"]))
    model.store.load_arrays(ckpt.tensors)
    from playercap.data import load_annotations

    records = load_annotations(data)[:10]
    t1 = time.monotonic()
    generate_captions(model, records, beam_size=5)
    per_caption = (time.monotonic() - t1) / 10.0

    ok = (rate >= 0.90 and epoch <= 100 and train_time < 600.0
          and per_caption < 0.5)
    _report("5 captioner-overfit", ok,
            "exact-match %.3f at epoch %d; train %.0f s; %.3f s/caption"
            % (rate, epoch, train_time, per_caption))


# ---------------------------------------------------------------------------
# 6. ablation ordering


def test_criterion_6_ablation_ordering():
    t0 = time.monotonic()
    records, catalog, vocab = synth_generate(SynthConfig(**ABLATION_SYNTH))
    assert len(records) >= 500
    hyper = HyperConfig(seed=0)
    spec = default_split(records, 5)
    train, _ = split_by_game(records, spec)
    pin_model = init_model(hyper, catalog, vocab, d_in=48)
    train_pin(pin_model, train, epochs=10, lr=3e-3, early_stop_mca=0.99)
    pin_ckpt = Checkpoint(1, hyper, catalog, vocab,
                          pin_model.store.as_arrays(), {"d_in": 48})
    table = run_ablation_suite(
        hyper, records,
        ["full", "no_bsim", "no_pin", "no_pin_no_vclm", "bsim_video",
         "bsim_player"],
        pin_ckpt, epochs=ABLATION_EPOCHS, lr=ABLATION_LR,
        batch_size=ABLATION_BATCH,
    )
    cider = {name: row["corpus"]["cider"] for name, row in table.items()}
    chain = ["full", "no_bsim", "no_pin", "no_pin_no_vclm"]
    gaps = [cider[a] - cider[b] for a, b in zip(chain, chain[1:])]
    both_best = cider["full"] >= max(cider["bsim_video"],
                                     cider["bsim_player"])
    ok = all(g > ABLATION_MARGIN for g in gaps) and both_best
    detail = ("cider " + " ".join(f"{k}={cider[k]:.2f}" for k in cider)
              + "; gaps " + " ".join(f"{g:.2f}" for g in gaps)
              + f"; {time.monotonic() - t0:.0f} s")
    _report("6 ablation-ordering", ok, detail)


# ---------------------------------------------------------------------------
# 7. decoding


def test_criterion_7_decoding(monkeypatch):
    cfg = TINY
    vocab = Vocabulary.from_tokens(tuple(f"w{i}" for i in range(7)))
    store = ParameterStore()
    rng = np.random.default_rng(3)
    init_prompt_params(store, cfg, rng)
    init_decoder_params(store, cfg, vocab.size, rng)

    mismatches = 0
    for i in range(100):
        rows = Tensor(np.random.default_rng(1000 + i).normal(
            size=(3, cfg.d_llm)))
        prompt = MultimodalPrompt(rows, (("video", 0, 3),))
        got = generate(prompt, store, cfg, beam_size=1, max_len=6)
        tokens = [BOS]
        want = []
        for _ in range(6):
            logits = decoder_forward(prompt, tokens, store, cfg).data[0]
            nxt = int(np.argmax(logits))
            tokens.append(nxt)
            if nxt == EOS:
                break
            want.append(nxt)
        mismatches += got != want

    logits = np.array([[0.4, 0.9, 1.1]])
    monkeypatch.setattr(cap, "decoder_forward",
                        lambda *a, **k: Tensor(logits))
    prompt = MultimodalPrompt(Tensor(np.zeros((2, cfg.d_llm))),
                              (("video", 0, 2),))
    got = generate(prompt, store, cfg, beam_size=2, max_len=3)
    z = logits[0] - logits[0].max()
    logp = z - math.log(np.exp(z).sum())
    best = min(enumerate_sequences(lambda prefix: logp, 3, EOS, 3),
               key=lambda r: (-r[1], r[0]))
    enum_ok = tuple(got) == best[0]
    monkeypatch.undo()

    ok = mismatches == 0 and enum_ok
    _report("7 decoding", ok,
            f"greedy mismatches {mismatches}/100; enumeration "
            f"{'ok' if enum_ok else 'bad'}")


# ---------------------------------------------------------------------------
# 8. determinism and persistence


def test_criterion_8_determinism_persistence(tmp_path):
    data = tmp_path / "corpus.jsonl"
    assert main(["synth", "--out", str(data), "--seed", "2",
                 "--n-games", "4", "--clips-per-game", "5",
                 "--n-players", "6"]) == 0
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"d_time": 8, "d_down": 4, "d_llm": 8,
                                    "n_q": 2, "n_heads": 2,
                                    "dropout_rate": 0.1}))

    pin = tmp_path / "pin.ckpt"
    blobs = []
    for _ in range(2):
        assert main(["train-pin", "--data", str(data), "--out", str(pin),
                     "--config", str(cfg_file), "--seed", "7",
                     "--epochs", "2", "--n-test-games", "1"]) == 0
        blobs.append(pin.read_bytes())
    ckpt_same = blobs[0] == blobs[1]

    ckpt = load_checkpoint(pin)
    round_trip = tmp_path / "copy.ckpt"
    save_checkpoint(round_trip, ckpt)
    reloaded = load_checkpoint(round_trip)
    rt_ok = all(np.array_equal(reloaded.tensors[k], ckpt.tensors[k])
                for k in ckpt.tensors)

    # reports byte-stable
    capfile = tmp_path / "cap.ckpt"
    assert main(["train-captioner", "--data", str(data), "--out",
                 str(capfile), "--pin-checkpoint", str(pin),
                 "--config", str(cfg_file), "--seed", "7", "--epochs", "2",
                 "--n-test-games", "1"]) == 0
    hyp = tmp_path / "hyp.jsonl"
    rep = tmp_path / "rep.json"
    rep_blobs = []
    for _ in range(2):
        assert main(["generate", "--data", str(data), "--checkpoint",
                     str(capfile), "--out", str(hyp), "--split", "test",
                     "--n-test-games", "1", "--beam", "2"]) == 0
        assert main(["eval", "--candidates", str(hyp), "--references",
                     str(data), "--out", str(rep)]) == 0
        rep_blobs.append(rep.read_bytes())
    reports_same = rep_blobs[0] == rep_blobs[1]

    # resume: loading a checkpoint reproduces the next-step loss exactly
    from playercap.data import load_annotations

    records = load_annotations(data)
    ckpt_c = load_checkpoint(capfile)
    losses = []
    for _ in range(2):
        model = init_model(ckpt_c.hyper, ckpt_c.catalog, ckpt_c.vocab,
                           int(ckpt_c.meta["d_in"]))
        model.store.load_arrays(ckpt_c.tensors)
        prompt, _ = clip_prompt(model, records[0], "annotated", "infer")
        targets = caption_target_ids(records[0].caption, model.vocab)
        losses.append(caption_loss(DecoderBatch(prompt, targets),
                                   model.store, model.cfg).item())
    resume_ok = losses[0] == losses[1]

    ok = ckpt_same and rt_ok and reports_same and resume_ok
    _report("8 determinism-persistence", ok,
            f"checkpoints {'==' if ckpt_same else '!='}, round-trip "
            f"{'ok' if rt_ok else 'bad'}, reports "
            f"{'==' if reports_same else '!='}, resume loss "
            f"{'==' if resume_ok else '!='}")


# ---------------------------------------------------------------------------
# 9. data pipeline invariants


def test_criterion_9_data_pipeline():
    records, catalog, _ = synth_generate(SynthConfig(
        n_games=40, clips_per_game=25, n_players=12, seed=9))
    assert len(records) == 1000
    pcs = build_player_centric_set(records)
    seen: dict[str, set] = {}
    for rec in records:
        for name in rec.player_names:
            seen.setdefault(name, set()).add(rec.video_id)
    coverage_ok = set(pcs.players()) == set(seen) and all(
        {v for v, _ in pcs.clips_of(n)} == seen[n] for n in seen)

    spec = default_split(records, 5)
    assert len(spec.train_games) == 35 and len(spec.test_games) == 5
    train, test = split_by_game(records, spec)
    leak_free = (len(train) + len(test) == len(records)
                 and not ({r.game_id for r in train}
                          & {r.game_id for r in test}))

    rng = np.random.default_rng(10)
    games = sorted({r.game_id for r in records})
    from playercap.data import SplitSpec

    for _ in range(20):
        mask = rng.integers(0, 2, size=len(games)).astype(bool)
        s = SplitSpec(frozenset(g for g, m in zip(games, mask) if m),
                      frozenset(g for g, m in zip(games, mask) if not m))
        tr, te = split_by_game(records, s)
        if ({r.video_id for r in tr} & {r.video_id for r in te}    # noqa: W504
                or len(tr) + len(te) != len(records)):
            leak_free = False
            break

    ok = coverage_ok and leak_free
    _report("9 data-pipeline", ok,
            f"coverage {'ok' if coverage_ok else 'bad'} on 1000 records; "
            f"35/5 split leak-free {'ok' if leak_free else 'bad'}")
