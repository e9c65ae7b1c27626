"""Small corpora, configs and the enumerable 3-candidate policy toy shared by several tests."""

import numpy as np

from compexp import tensor as T
from compexp.config import ModelConfig, TrainConfig
from compexp.corpus import Corpus, LabeledSentence, ReviewRecord, Vocab
from compexp.model import CompExp, Instance
from compexp.toydata import generate_reviews
from compexp.training import RewardBundle
from oracles import central_fd

SMALL_MODEL = ModelConfig(emb_dim=8, hidden=6, att_dim=6, rating_dim=3, transform_dim=8,
                          dec_emb_dim=8, dec_hidden=8, max_len=12, init_scale=0.3)


def small_corpus(seed=1, n_users=8, n_items=6, per_user=5):
    recs = [ReviewRecord(r["user_id"], r["item_id"], r["rating"], r["text"])
            for r in generate_reviews(n_users=n_users, n_items=n_items, per_user=per_user, seed=seed)]
    return Corpus.build(recs, min_user=2, min_item=2, min_freq=1, seed=seed)


def small_train_config(**kw):
    base = dict(seed=0, max_profile=6, batch_size=8, ext_epochs=2, ref_epochs=2, ft_epochs=1,
                ft_eval_size=8, mc_samples=2)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# 3-candidate toy: vocab {unk, eos, a} is emittable and max_len=2 leaves 7 outputs
# ---------------------------------------------------------------------------

TOY_VOCAB = Vocab(["<pad>", "<unk>", "<bos>", "<eos>", "a"])
TOY_OUTPUTS = [[3], [1, 3], [4, 3], [1, 1], [1, 4], [4, 1], [4, 4]]
TOY_MODEL = ModelConfig(emb_dim=3, hidden=2, att_dim=2, rating_dim=2, transform_dim=3,
                        dec_emb_dim=2, dec_hidden=2, max_len=2, init_scale=0.8)


def _toy_sentence(ids, rating=3):
    return LabeledSentence(tuple(TOY_VOCAB.decode(ids)), rating, "u", "i", -1, tuple(ids))


class PolicyToy:
    def __init__(self, seed=1, reward_seed=0, train=None):
        self.model = CompExp.create(TOY_MODEL, TOY_VOCAB, 4, seed=seed)
        self.inst = Instance("u", "i", 4, [(_toy_sentence((4, 1)), 2), (_toy_sentence((1,)), 5)],
                             [_toy_sentence((4,)), _toy_sentence((4, 4)), _toy_sentence((1, 4))])
        rng = np.random.default_rng(reward_seed)
        self.table = {(j, tuple(y)): rng.uniform(size=3) for j in range(3) for y in TOY_OUTPUTS}
        self.cfg = train or TrainConfig(mc_samples=2)

    def reward_fn(self, inst, gen):
        pi, pi_ext, pi_ref = self.table[(gen.prototype_index, tuple(gen.emitted))]
        return RewardBundle(pi, pi_ext, pi_ref)

    def _terms(self):
        c = self.cfg
        R_ref = np.zeros((3, 7))
        R_ext = np.zeros((3, 7))
        for j in range(3):
            for k, y in enumerate(TOY_OUTPUTS):
                pi, pi_ext, pi_ref = self.table[(j, tuple(y))]
                R_ref[j, k] = c.lambda_1 * pi + c.lambda_2 * pi_ref
                R_ext[j, k] = c.lambda_3 * pi + c.lambda_4 * pi_ext
        return R_ref, R_ext

    def enumerate(self):
        """(P_ext over the 3 candidates, P_ref over the 7 outputs for each candidate)."""
        m = self.model
        with T.no_grad():
            ep = m.extraction_pass([self.inst])
            P = np.exp(ep.log_probs.data[0, :3])
            xh, st, mask = m.refined_inputs(ep, np.zeros(21, dtype=np.int64), np.repeat(np.arange(3), 7))
            lp = m.sequence_log_probs(xh, st, mask, TOY_OUTPUTS * 3).data.reshape(3, 7)
        return P, np.exp(lp)

    def exact_gradient(self):
        """Finite-difference gradient of the enumerated objective, split the way the estimator
        routes it: decoder through P_ref with the prototype law fixed, encoder through P_ext with
        the per-prototype expected reward fixed."""
        R_ref, R_ext = self._terms()
        P0, Q0 = self.enumerate()
        q_ext = (Q0 * R_ext).sum(axis=1)
        p = self.model.params
        enc, dec = p.names("enc."), p.names("dec.")

        def j_ext():
            return float(self.enumerate()[0] @ q_ext)

        def j_ref():
            return float(P0 @ (self.enumerate()[1] * R_ref).sum(axis=1))

        g_enc = central_fd(j_ext, [p[n].data for n in enc])
        g_dec = central_fd(j_ref, [p[n].data for n in dec])
        return dict(zip(enc, g_enc)) | dict(zip(dec, g_dec))
