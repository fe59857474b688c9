"""Differentiable autoregressive policy: backends, exact gradients, sampling, Fisher products."""

from .fisher import FisherOperator, fisher_vector_product
from .model import (Arch, CHECKPOINT_FORMAT_VERSION, ContextOverflowError, NonFiniteLossError,
                    PolicyError, backward_from_dlogits, batch_sequence_logprobs,
                    ce_loss_and_grad, compose_context, context_windows, init_params,
                    load_checkpoint, logits_for_windows, logits_jvp, mlp_arch,
                    next_token_logits, save_checkpoint, sequence_logprob,
                    sequence_logprob_grad, tabular_arch)
from .sample import (ENUMERATION_CAP, SampledResponse, SamplerConfig, enumerate_responses,
                     greedy_decode, sample_response, sample_responses)

__all__ = [
    "Arch", "CHECKPOINT_FORMAT_VERSION", "ContextOverflowError", "ENUMERATION_CAP", "FisherOperator",
    "NonFiniteLossError", "PolicyError", "SampledResponse", "SamplerConfig",
    "backward_from_dlogits", "batch_sequence_logprobs", "ce_loss_and_grad",
    "compose_context", "context_windows", "enumerate_responses", "fisher_vector_product",
    "greedy_decode", "init_params", "load_checkpoint", "logits_for_windows", "logits_jvp",
    "mlp_arch", "next_token_logits", "sample_response", "sample_responses",
    "save_checkpoint", "sequence_logprob", "sequence_logprob_grad", "tabular_arch",
]
