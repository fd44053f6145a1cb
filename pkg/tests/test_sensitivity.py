import numpy as np
import pytest

from bmpq.errors import ContractError
from bmpq.quant import bits_to_codes, codes_to_bits
from bmpq.sensitivity import SensitivityLedger, bit_gradients, nbg, nbg_closed_form


class TestBitGradients:
    def test_hand_row(self):
        np.testing.assert_allclose(bit_gradients([0.1], 0.5, 4), [[-0.4, 0.2, 0.1, 0.05]],
                                   rtol=1e-15)

    def test_zero_grad(self):
        np.testing.assert_array_equal(bit_gradients([0.0, 0.0], 0.3, 4), np.zeros((2, 4)))

    def test_sign_flip(self, rng):
        g = rng.normal(size=7)
        np.testing.assert_array_equal(bit_gradients(-g, 0.2, 8), -bit_gradients(g, 0.2, 8))

    def test_matches_linearized_loss(self, rng):
        # L = sum(g * S * code(bits)); perturbing one bit by 1 moves L by the bit gradient
        g, scale, q = rng.normal(size=5), 0.37, 4
        codes = rng.integers(-8, 8, size=5)
        bits = codes_to_bits(codes, q)
        bg = bit_gradients(g, scale, q)
        for j in range(5):
            for i in range(q):
                flipped = bits.copy()
                flipped[j, i] ^= 1
                delta = float(np.sum(g * scale * (bits_to_codes(flipped) - codes)))
                sign = 1 if flipped[j, i] == 1 else -1
                assert delta == pytest.approx(sign * bg[j, i], rel=1e-12)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ContractError):
            bit_gradients([1.0], 0.0, 4)


class TestNBG:
    def test_hand_values(self):
        assert nbg(np.array([[0.1, -0.2, 0.3, -0.4], [0.0, 0.1, 0.0, 0.2]])) == pytest.approx(0.65)
        assert nbg(np.zeros((3, 4))) == 0.0
        assert nbg(np.array([[-1.0, 0, 0, 0]])) == 1.0

    def test_closed_form(self, rng):
        for _ in range(100):
            g = rng.normal(size=rng.integers(1, 300)) * 10.0 ** rng.uniform(-6, 2)
            scale, q = rng.uniform(1e-4, 2), int(rng.choice([2, 4, 8, 16]))
            explicit = nbg(bit_gradients(g, scale, q))
            assert abs(explicit - nbg_closed_form(g, scale, q)) <= 1e-9 * explicit

    def test_linear_in_gradient(self, rng):
        g = rng.normal(size=20)
        assert nbg(bit_gradients(3 * g, 0.1, 4)) == pytest.approx(3 * nbg(bit_gradients(g, 0.1, 4)))


class TestLedger:
    def test_epoch_and_interval_means(self, rng):
        ledger = SensitivityLedger(["a"], 4)
        values = []
        for _ in range(2):
            batch = [ledger.accumulate_batch("a", rng.normal(size=6), 0.1) for _ in range(3)]
            ledger.finalize_epoch()
            values.append(sum(batch) / 3)
        assert ledger.epoch_nbg["a"] == pytest.approx(values)
        assert ledger.enbg("a") == pytest.approx(np.mean(values))

    def test_enbg_examples(self):
        ledger = SensitivityLedger(["a"], 4)
        ledger.epoch_nbg["a"] = [0.6, 0.7]
        assert ledger.enbg("a") == pytest.approx(0.65)
        ledger.epoch_nbg["a"] = [0.4]
        assert ledger.enbg("a") == 0.4

    def test_enbg_random_interval_and_permutation(self, rng):
        ledger = SensitivityLedger(["a"], 4)
        vals = list(rng.uniform(0, 1, size=20))
        ledger.epoch_nbg["a"] = list(vals)
        assert ledger.enbg("a") == float(np.mean(vals))
        ledger.epoch_nbg["a"] = list(rng.permutation(vals))
        assert ledger.enbg("a") == pytest.approx(float(np.mean(vals)), rel=1e-15)

    def test_empty_epoch_rejected(self):
        with pytest.raises(ContractError):
            SensitivityLedger(["a"], 4).finalize_epoch()

    def test_empty_interval_rejected(self):
        with pytest.raises(ContractError):
            SensitivityLedger(["a"], 4).enbg("a")

    def test_reset_interval(self, rng):
        ledger = SensitivityLedger(["a", "b"], 4)
        for name in ("a", "b"):
            ledger.accumulate_batch(name, rng.normal(size=3), 0.5)
        ledger.finalize_epoch()
        assert ledger.epochs_in_interval == 1
        ledger.reset_interval()
        assert ledger.interval == 1 and ledger.epochs_in_interval == 0
        assert all(v == [] for v in ledger.snapshot()["epoch_nbg"].values())

    def test_closed_form_path_agrees(self, rng):
        explicit, closed = SensitivityLedger(["a"], 8), SensitivityLedger(["a"], 8, closed_form=True)
        for _ in range(5):
            g = rng.normal(size=40)
            explicit.accumulate_batch("a", g, 0.02)
            closed.accumulate_batch("a", g, 0.02)
        explicit.finalize_epoch()
        closed.finalize_epoch()
        assert closed.enbg("a") == pytest.approx(explicit.enbg("a"), rel=1e-12)

    def test_state_round_trip(self, rng):
        ledger = SensitivityLedger(["a"], 4)
        ledger.accumulate_batch("a", rng.normal(size=3), 0.5)
        ledger.finalize_epoch()
        ledger.accumulate_batch("a", rng.normal(size=3), 0.5)
        copy = SensitivityLedger.from_state(ledger.state())
        g = rng.normal(size=3)
        ledger.accumulate_batch("a", g, 0.5)
        copy.accumulate_batch("a", g, 0.5)
        ledger.finalize_epoch()
        copy.finalize_epoch()
        assert copy.enbg("a") == ledger.enbg("a")
