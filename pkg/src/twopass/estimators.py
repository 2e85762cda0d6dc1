"""scikit-learn style wrappers around the two passes.

``X`` is always a list of :class:`~twopass.frontend.Utterance`; the
reference transcripts travel inside the utterances, so ``y`` is ignored.
Predictions are word lists.
"""
from __future__ import annotations

import dataclasses

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive, check_positive_int, check_unit_interval, check_utterances
from .harness.config import DecodeConfig, ExperimentConfig, VadConfig
from .harness.pipeline import (
    Evaluator,
    RunConfig,
    finetune_second_pass,
    make_system,
    train_first_pass,
    train_second_pass,
)


class TransducerASR(BaseEstimator):
    """Streaming first pass with the joint ``</s>`` endpointer."""

    def __init__(self, max_steps: int = 3750, learning_rate: float = 0.1, momentum: float = 0.9,
                 batch_size: int = 16, domain_onehot: bool = True, beam_size: int = 8,
                 eos_decode_penalty: float = 0.0, seed: int = 0):
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.domain_onehot = domain_onehot
        self.beam_size = beam_size
        self.eos_decode_penalty = eos_decode_penalty
        self.seed = seed

    def _config(self) -> ExperimentConfig:
        base = ExperimentConfig()
        opt = dataclasses.replace(
            base.rnnt_train,
            max_steps=check_positive_int(self.max_steps, "max_steps"),
            learning_rate=check_positive(self.learning_rate, "learning_rate"),
            momentum=float(self.momentum),
            batch_size=check_positive_int(self.batch_size, "batch_size"),
        )
        decode = DecodeConfig(check_positive_int(self.beam_size, "beam_size"), base.decode.max_symbols_per_frame,
                              float(self.eos_decode_penalty))
        return dataclasses.replace(base, seed=int(self.seed), domain_onehot=bool(self.domain_onehot),
                                   rnnt_train=opt, decode=decode)

    def fit(self, X, y=None):
        X = check_utterances(X)
        self.config_ = self._config()
        res = train_first_pass(self.config_, X)
        self.params_ = res.eval_params
        self.loss_curve_ = [loss for _, loss, _, _ in res.curve]
        self.system_ = make_system(self.config_, self.params_)
        return self

    def _evaluator(self, X) -> Evaluator:
        check_is_fitted(self, "system_")
        return Evaluator(self.system_, check_utterances(X), self.config_.decode, VadConfig())

    def predict(self, X) -> list[list[str]]:
        ev = self._evaluator(X)
        recs = ev.records(RunConfig(eos_decode_penalty=self.config_.decode.eos_decode_penalty))
        by_uid = {r.uid: list(r.hyp) for r in recs}
        return [by_uid[u.uid] for u in check_utterances(X)]

    def transform(self, X) -> list:
        """Shared-encoder outputs, one (frames, dim) array per utterance."""
        check_is_fitted(self, "system_")
        return [self.system_.shared_encoding(u) for u in check_utterances(X)]

    def score(self, X, y=None) -> float:
        """Word accuracy, ``1 - WER/100``, so larger is better."""
        ev = self._evaluator(X)
        return 1.0 - ev.point(RunConfig(eos_decode_penalty=self.config_.decode.eos_decode_penalty)).wer / 100.0


class LasRescorer(BaseEstimator):
    """Second-pass rescorer on top of a fitted :class:`TransducerASR`."""

    def __init__(self, first_pass=None, lambda_las: float = 0.5, max_steps: int = 1500,
                 learning_rate: float = 0.1, mwer_steps: int = 0, seed: int = 0):
        self.first_pass = first_pass
        self.lambda_las = lambda_las
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.mwer_steps = mwer_steps
        self.seed = seed

    def fit(self, X, y=None):
        X = check_utterances(X)
        if not isinstance(self.first_pass, TransducerASR):
            raise TypeError("first_pass must be a TransducerASR")
        check_is_fitted(self.first_pass, "system_")
        lam = check_unit_interval(self.lambda_las, "lambda_las")
        base = self.first_pass.config_
        cfg = dataclasses.replace(
            base,
            seed=int(self.seed),
            las_train=dataclasses.replace(base.las_train, max_steps=check_positive_int(self.max_steps, "max_steps"),
                                          learning_rate=check_positive(self.learning_rate, "learning_rate")),
        )
        system = self.first_pass.system_
        res = train_second_pass(cfg, system, X)
        system = system.replace(las=res.eval_params)
        if self.mwer_steps:
            m = cfg.mwer
            cfg = dataclasses.replace(cfg, mwer=dataclasses.replace(
                m, lambda_las=lam, train=dataclasses.replace(m.train, max_steps=check_positive_int(self.mwer_steps, "mwer_steps"))))
            mres, _ = finetune_second_pass(cfg, system, X)
            system = system.replace(las=mres.eval_params)
        self.config_ = cfg
        self.system_ = system
        self.params_ = system.las
        return self

    def _run(self) -> RunConfig:
        return RunConfig(eos_decode_penalty=self.config_.decode.eos_decode_penalty,
                         lambda_las=check_unit_interval(self.lambda_las, "lambda_las"))

    def predict(self, X) -> list[list[str]]:
        check_is_fitted(self, "system_")
        X = check_utterances(X)
        ev = Evaluator(self.system_, X, self.config_.decode, VadConfig())
        by_uid = {r.uid: list(r.hyp) for r in ev.records(self._run())}
        return [by_uid[u.uid] for u in X]

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "system_")
        ev = Evaluator(self.system_, check_utterances(X), self.config_.decode, VadConfig())
        return 1.0 - ev.point(self._run()).wer / 100.0
