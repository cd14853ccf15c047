from models.gmm_head import gmm_log_prob
from .objective_base import LossOutput, TrainingObjective


class GaussianMixtureObjective(TrainingObjective):
    """Negative log-likelihood of the next embedding under the GMM head (GIVT).

    With noise augmentation on (GIVT+noise) only the Backbone inputs change;
    the likelihood is always evaluated on the clean embedding.
    """

    def compute_loss(self, model, batch, rng, cfg):
        z = self.conditioning(model, batch, rng, cfg)
        nll = -gmm_log_prob(model.gmm_head_forward(z), batch)
        return LossOutput(loss=nll.mean(), per_sequence=nll.detach().mean(dim=1))
