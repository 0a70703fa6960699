"""Smoke test for the pycfdecode extension module.

Build and install first, e.g. `pip install maturin && maturin develop -m crates/python/Cargo.toml`.
"""

import tempfile
from pathlib import Path

import pycfdecode as cf


def main() -> None:
    model = cf.Model.train_ngram("the cat sat\nthe hat sat\na cat and a hat", order=3, smoothing=0.1)
    prompt = model.prompt_tokens("")
    reference = model.reference_tokens("a tan cat")
    assert reference[-1] == model.eos

    trace = cf.recover(model, prompt, reference, seed=7, record_id="smoke")
    assert trace.num_steps == len(reference)
    assert len(trace.noise[0]) == model.vocab_size

    # self-replay reproduces the reference
    tokens, truncated = cf.replay(model, prompt, trace, beta=1.0)
    assert tokens == reference and not truncated
    assert model.decode(tokens) == "a tan cat"

    # traces survive a byte round trip
    assert cf.Trace.from_bytes(trace.to_bytes()) == trace

    tokens, _ = cf.greedy(model, prompt, max_len=20)
    assert len(tokens) <= 20
    a = cf.sample(model, prompt, seed=3, record_id="r")
    b = cf.vocab_bias(model, prompt, reference, 0.0, seed=3, record_id="r")
    assert a == b, "zero bias must equal plain sampling"

    assert cf.levenshtein("kitten", "sitting") == 3
    assert abs(cf.similarity("kitten", "sitting") - 4 / 7) < 1e-12
    assert cf.qwk([4, 3, 2, 1], [1, 2, 3, 4], 4) == -1.0

    with tempfile.TemporaryDirectory() as tmp:
        tb = Path(tmp) / "tb"
        n = cf.make_testbed(str(tb), seed=0, transitions_cap=24)
        assert n == 24
        testbed = cf.Model.open(f"testbed:{tb}")
        out = cf.counterfactual(testbed, "<z1>", "nopqrs", "<z4>", beta=0.3)
        assert isinstance(out, str)
        assert testbed.score("aaaa") == 4
        config = Path(tmp) / "sweep.json"
        config.write_text(
            '{"model": {"testbed": "tb"}, "methods": ["beta-hindsight", "sample"],'
            ' "betas": [0.3], "output_dir": "out", "timing": false}'
        )
        csv = cf.run_sweep(str(config))
        assert csv.splitlines()[0] == "method,param,n,mean_similarity,qwk,seconds"
        assert (Path(tmp) / "out" / "records.jsonl").exists()

    print("pycfdecode smoke test passed")


if __name__ == "__main__":
    main()
