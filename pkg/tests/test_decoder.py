import itertools
import math

import numpy as np
import pytest

from src import numeric as nm
from src.decoder import (
    AnswerDecoder,
    BeamHypothesis,
    GenerationConfig,
    beam_search,
    beam_search_steps,
    decode_train,
    decoder_step_fn,
    greedy_decode,
    greedy_steps,
    sequence_log_prob,
    sequence_loss,
)
from src.errors import ContractError, ShapeError
from src.numeric import Tensor
from src.rng import Rng
from src.tokenizer import END_ID, START_ID

WORD_A, WORD_B = 6, 7
VOCAB = 8


def _memory(rng: Rng, b: int = 1, n: int = 4, d: int = 8) -> tuple[Tensor, np.ndarray]:
    mask = np.ones((b, n), dtype=np.int64)
    mask[:, -1] = 0
    return Tensor(rng.normal(0, 1, (b, n, d))), mask


def _table_step(table: dict[tuple[int, ...], dict[int, float]]):
    """Step function backed by explicit next-token probabilities per prefix."""

    def step(prefixes):
        out = np.full((len(prefixes), VOCAB), -np.inf)
        for row, prefix in enumerate(prefixes):
            for token, p in table.get(tuple(prefix), {END_ID: 1.0}).items():
                out[row, token] = math.log(p)
        return out

    return step


# start -> A (0.6) leads to a flat continuation; start -> B (0.4) ends with 0.9
TRAP = {
    (START_ID,): {WORD_A: 0.6, WORD_B: 0.4},
    (START_ID, WORD_A): {END_ID: 0.3, WORD_A: 0.35, WORD_B: 0.35},
    (START_ID, WORD_B): {END_ID: 0.9, WORD_A: 0.1},
}


class TestDecodeTrain:
    def test_missing_start(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng)
        memory, mask = _memory(rng)
        with pytest.raises(ContractError, match=r"\[start\]"):
            decode_train(dec, memory, mask, np.array([[6, 7, END_ID]]))

    def test_target_too_long(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng)
        memory, mask = _memory(rng)
        with pytest.raises(ShapeError):
            decode_train(dec, memory, mask, np.array([[START_ID] + [6] * 6]))

    def test_causal(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng).eval()
        memory, mask = _memory(rng)
        a = decode_train(dec, memory, mask, np.array([[START_ID, 6, 7, 8, END_ID]])).data
        b = decode_train(dec, memory, mask, np.array([[START_ID, 6, 11, 12, 13]])).data
        np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)
        assert not np.allclose(a[0, 2], b[0, 2])

    def test_memory_pads_are_ignored(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng).eval()
        memory, mask = _memory(rng)
        other = Tensor(memory.data.copy())
        other.data[0, -1] += 50.0
        targets = np.array([[START_ID, 6, END_ID]])
        np.testing.assert_allclose(
            decode_train(dec, memory, mask, targets).data, decode_train(dec, other, mask, targets).data, atol=1e-12
        )

    def test_zero_embeddings_give_uniform_logits(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng)
        dec.token_embeddings.weight.data[...] = 0.0
        memory, mask = _memory(rng)
        logits = decode_train(dec, memory, mask, np.array([[START_ID, 6, END_ID]])).data
        np.testing.assert_array_equal(logits, 0.0)

    def test_gradient_check(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng.child("model"))
        memory, mask = _memory(rng, b=2)
        memory.requires_grad = True
        targets = np.array([[START_ID, 6, 7, END_ID, 0, 0], [START_ID, 9, END_ID, 0, 0, 0]])
        params = {**dec.named_parameters(), "memory": memory}
        errors = nm.grad_check_params(
            lambda: sequence_loss(decode_train(dec, memory, mask, targets), targets),
            params,
            max_entries=5,
            rng=rng.child("coords"),
        )
        assert max(errors.values()) < 1e-4


class TestSequenceLoss:
    def test_shift_and_ignore_pads(self):
        logits = Tensor(np.zeros((1, 4, 5)))
        targets = np.array([[START_ID, 1, 2, 0]])
        # two scored positions, both uniform over 5 tokens
        assert sequence_loss(logits, targets).item() == pytest.approx(math.log(5))

    def test_needs_two_positions(self):
        with pytest.raises(ShapeError):
            sequence_loss(Tensor(np.zeros((1, 1, 5))), np.array([[START_ID]]))


class TestBeamSearchSteps:
    def test_escapes_greedy_trap(self):
        step = _table_step(TRAP)
        greedy = greedy_steps(step, max_answer_len=3)
        beam = beam_search_steps(step, beam_width=2, max_answer_len=3)
        assert greedy.ids[1] == WORD_A
        assert beam.answer_ids() == [WORD_B]
        assert beam.finished

        best = max(
            (sequence_log_prob(step, [START_ID, a, b]), [a, b])
            for a, b in itertools.product(range(VOCAB), repeat=2)
            if np.isfinite(sequence_log_prob(step, [START_ID, a, b]))
        )
        assert beam.log_prob == pytest.approx(best[0])
        assert beam.ids[1:] == best[1]

    def test_width_one_is_greedy_on_tables(self):
        step = _table_step(TRAP)
        assert beam_search_steps(step, 1, 3).ids == greedy_steps(step, 3).ids

    def test_max_len_one_is_empty(self):
        hyp = beam_search_steps(_table_step(TRAP), beam_width=3, max_answer_len=1)
        assert hyp.answer_ids() == []

    def test_ties_prefer_lower_ids(self):
        flat = lambda prefixes: np.full((len(prefixes), VOCAB), -math.log(VOCAB))
        assert beam_search_steps(flat, beam_width=3, max_answer_len=2).ids == [START_ID, 0]

    def test_unfinished_falls_back_to_best_live(self):
        loop = {(START_ID,): {WORD_A: 1.0}, (START_ID, WORD_A): {WORD_A: 1.0}}
        hyp = beam_search_steps(_table_step(loop), beam_width=2, max_answer_len=3)
        assert not hyp.finished
        assert hyp.answer_ids() == [WORD_A, WORD_A]

    def test_unfinished_greedy_does_not_replace_finished_beam(self):
        # greedy keeps repeating A (0.6) and never ends; B then [end] is finished at 0.2
        table = {
            (START_ID,): {WORD_A: 0.6, WORD_B: 0.4},
            (START_ID, WORD_A): {WORD_A: 1.0},
            (START_ID, WORD_B): {END_ID: 0.5, WORD_A: 0.5},
        }
        step = _table_step(table)
        assert not greedy_steps(step, 3).finished
        hyp = beam_search_steps(step, beam_width=2, max_answer_len=3)
        assert hyp.finished
        assert hyp.answer_ids() == [WORD_B]
        assert hyp.log_prob == pytest.approx(math.log(0.2))

    def test_finished_hypotheses_are_frozen(self):
        table = {(START_ID,): {END_ID: 0.7, WORD_A: 0.3}, (START_ID, WORD_A): {WORD_B: 0.5, END_ID: 0.5}}
        hyp = beam_search_steps(_table_step(table), beam_width=2, max_answer_len=4)
        assert hyp.ids == [START_ID, END_ID]
        assert hyp.log_prob == pytest.approx(math.log(0.7))

    def test_length_penalty_favours_longer(self):
        hyp = BeamHypothesis([START_ID, 6, 7, 8, END_ID], log_prob=-4.0, finished=True)
        assert hyp.score(1.0) == pytest.approx(-1.0)
        assert hyp.score() == -4.0

    def test_invalid_width(self):
        with pytest.raises(ValueError):
            beam_search_steps(_table_step(TRAP), 0, 3)
        with pytest.raises(ValueError):
            GenerationConfig(beam_width=0)


class TestBeamSearchOnModels:
    def test_width_one_matches_greedy_on_random_models(self, tiny_decoder_config):
        gen = GenerationConfig(beam_width=1, max_answer_len=6)
        for seed in range(100):
            rng = Rng(seed)
            dec = AnswerDecoder(tiny_decoder_config, rng.child("model")).eval()
            memory, mask = _memory(rng.child("memory"))
            assert beam_search(dec, memory, mask, gen) == greedy_decode(dec, memory, mask, 6)

    def test_beam_never_scores_below_greedy(self, tiny_decoder_config):
        for seed in range(20):
            rng = Rng(seed)
            dec = AnswerDecoder(tiny_decoder_config, rng.child("model")).eval()
            memory, mask = _memory(rng.child("memory"))
            step = decoder_step_fn(dec, memory, mask)
            beam, greedy = beam_search_steps(step, 3, 6), greedy_steps(step, 6)
            assert beam.finished or not greedy.finished
            if beam.finished == greedy.finished:
                assert beam.log_prob >= greedy.log_prob - 1e-12

    def test_single_query_only(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng)
        memory, mask = _memory(rng, b=2)
        with pytest.raises(ShapeError):
            beam_search(dec, memory, mask, GenerationConfig())

    def test_generation_is_capped_by_decoder_length(self, tiny_decoder_config, rng):
        dec = AnswerDecoder(tiny_decoder_config, rng).eval()
        memory, mask = _memory(rng)
        ids = beam_search(dec, memory, mask, GenerationConfig(beam_width=2, max_answer_len=50))
        assert len(ids) <= tiny_decoder_config.max_answer_len - 1
