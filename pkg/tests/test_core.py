import json

import pytest

from critmask.core import (
    Choice,
    DataError,
    MaskedExample,
    RunConfig,
    Sample,
    config_as_dict,
    load_samples,
    make_config,
    parse_config_file,
    read_masked_dataset,
    write_masked_dataset,
    write_samples,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestSamples:
    def test_load_numeric_record(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_lines(p, [json.dumps({"id": "q1", "question": "2+2=?", "answer": "4", "task": "numeric"})])
        samples = load_samples(p)
        assert len(samples) == 1
        s = samples[0]
        assert (s.id, s.question, s.gold_answer, s.task_kind) == ("q1", "2+2=?", "4", "numeric")
        assert s.choices is None

    def test_duplicate_id_rejected_with_id_in_message(self, tmp_path):
        p = tmp_path / "c.jsonl"
        rec = {"id": "q1", "question": "x", "answer": "1", "task": "numeric"}
        write_lines(p, [json.dumps(rec), json.dumps(rec)])
        with pytest.raises(DataError, match="q1"):
            load_samples(p)

    def test_choice_record_without_choices_is_malformed(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_lines(p, [json.dumps({"id": "q1", "question": "x", "answer": "B", "task": "choice"})])
        with pytest.raises(DataError, match=":1"):
            load_samples(p)

    def test_malformed_line_names_line_number(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_lines(
            p,
            [
                json.dumps({"id": "q1", "question": "x", "answer": "1", "task": "numeric"}),
                "{not json",
            ],
        )
        with pytest.raises(DataError, match=":2"):
            load_samples(p)

    def test_every_wellformed_line_yields_exactly_one_sample(self, tmp_path):
        p = tmp_path / "c.jsonl"
        records = [
            {"id": f"q{i}", "question": f"what is {i}?", "answer": str(i), "task": "numeric"}
            for i in range(10)
        ]
        write_lines(p, [json.dumps(r) for r in records])
        samples = load_samples(p)
        assert [s.id for s in samples] == [r["id"] for r in records]

    def test_sample_roundtrip_through_writer(self, tmp_path):
        p = tmp_path / "c.jsonl"
        original = [
            Sample(id="a", question="pick", gold_answer="B", task_kind="choice",
                   choices=(Choice("A", "one"), Choice("B", "two"))),
            Sample(id="b", question="add", gold_answer="3"),
        ]
        write_samples(original, p)
        assert load_samples(p) == original

    def test_invariants(self):
        with pytest.raises(DataError):
            Sample(id="", question="q", gold_answer="1")
        with pytest.raises(DataError):
            Sample(id="x", question="q", gold_answer="")
        with pytest.raises(DataError):
            Sample(id="x", question="q", gold_answer="1", task_kind="choice")  # no choices
        with pytest.raises(DataError):
            Sample(id="x", question="q", gold_answer="1", choices=(Choice("A", "a"),))


def example(**kw) -> MaskedExample:
    base = dict(
        sample_id="s1",
        question="q",
        token_texts=("a", "b", "c"),
        token_ids=(1, 2, 3),
        weights=(0.0, 1.0, 0.0),
        policy="strict3",
        backend_tag="toy",
    )
    base.update(kw)
    return MaskedExample(**base)


class TestMaskedDataset:
    def test_single_record_roundtrip(self, tmp_path):
        p = tmp_path / "m.jsonl"
        rec = example()
        write_masked_dataset([rec], p)
        lines = p.read_text().strip().split("\n")
        assert len(lines) == 1
        parsed = json.loads(lines[0])
        assert parsed["token_texts"] == ["a", "b", "c"]
        assert parsed["weights"] == [0.0, 1.0, 0.0]
        assert read_masked_dataset(p) == [rec]

    def test_empty_dataset(self, tmp_path):
        p = tmp_path / "m.jsonl"
        write_masked_dataset([], p)
        assert p.read_text() == ""
        assert read_masked_dataset(p) == []

    def test_length_mismatch_rejected_before_any_write(self, tmp_path):
        with pytest.raises(DataError):
            example(weights=(1.0, 0.5))

    def test_full_precision_roundtrip(self, tmp_path):
        p = tmp_path / "m.jsonl"
        weird = (0.1 + 0.2, 1e-17 + 1.0, 2.0)
        rec = example(weights=weird)
        write_masked_dataset([rec], p)
        back = read_masked_dataset(p)[0]
        assert back.weights == rec.weights  # bit-exact
        assert back == rec

    def test_all_zero_weights_rejected_on_load(self, tmp_path):
        p = tmp_path / "m.jsonl"
        line = {
            "sample_id": "s", "question": "q", "token_texts": ["a"],
            "token_ids": [1], "weights": [0.0], "policy": "p", "backend_tag": "b",
        }
        p.write_text(json.dumps(line) + "\n")
        with pytest.raises(DataError, match=":1"):
            read_masked_dataset(p)

    def test_negative_weight_rejected_on_load(self, tmp_path):
        p = tmp_path / "m.jsonl"
        line = {
            "sample_id": "s", "question": "q", "token_texts": ["a", "b"],
            "token_ids": [1, 2], "weights": [-0.5, 1.0], "policy": "p", "backend_tag": "b",
        }
        p.write_text(json.dumps(line) + "\n")
        with pytest.raises(DataError):
            read_masked_dataset(p)

    def test_missing_field_names_line(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps({"sample_id": "s"}) + "\n")
        with pytest.raises(DataError, match=":1"):
            read_masked_dataset(p)

    def test_many_records_roundtrip(self, tmp_path):
        import random

        rng = random.Random(5)
        records = []
        for i in range(25):
            n = rng.randint(1, 8)
            weights = [rng.random() for _ in range(n)]
            weights[rng.randrange(n)] = 1.0  # ensure a positive weight
            records.append(
                example(
                    sample_id=f"s{i}",
                    token_texts=tuple(f"t{j}" for j in range(n)),
                    token_ids=tuple(range(n)),
                    weights=tuple(weights),
                )
            )
        p = tmp_path / "m.jsonl"
        write_masked_dataset(records, p)
        assert read_masked_dataset(p) == records


class TestRunConfig:
    def test_defaults_mirror_main_setting(self):
        cfg = RunConfig()
        assert cfg.k == 3
        assert cfg.policy == "strict3"
        assert cfg.sampling_max_attempts == 100
        assert cfg.sampling_temperature == 1.0
        assert cfg.transfer_fraction == 0.15

    def test_policy_k_compatibility(self):
        assert RunConfig(k=2, policy="strict2").k == 2
        with pytest.raises(DataError):
            RunConfig(k=2, policy="strict3")
        with pytest.raises(DataError):
            RunConfig(k=2, policy="union3")
        with pytest.raises(DataError):
            RunConfig(k=1, policy="strict2")

    def test_transfer_fraction_bounds(self):
        with pytest.raises(DataError):
            RunConfig(transfer_fraction=0.0)
        with pytest.raises(DataError):
            RunConfig(transfer_fraction=1.2)
        RunConfig(transfer_fraction=1.0)

    def test_config_file_and_override_precedence(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("k = 4\npolicy = union3\nseed = 9  # comment\n")
        file_values = parse_config_file(p)
        cfg = make_config(file_values, overrides={"seed": 11})
        assert cfg.k == 4
        assert cfg.policy == "union3"
        assert cfg.seed == 11  # flag wins over file

    def test_unknown_config_key_rejected(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("mystery = 1\n")
        with pytest.raises(DataError, match="mystery"):
            parse_config_file(p)

    def test_config_as_dict_roundtrip(self):
        cfg = RunConfig(k=4, policy="graded3", seed=7)
        assert make_config(config_as_dict(cfg)) == cfg
