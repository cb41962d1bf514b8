from .tensor import (
    NonFiniteError, ShapeError, Tensor, add, as_tensor, backward, concat, exp,
    grad_enabled, index, log, log_softmax, logsumexp, matmul, mean, mul,
    no_grad, power, relu, reshape, segment_sum, sigmoid, softmax, softplus,
    stack, sub, tanh, transpose, tsum,
)
from .nn import GRUCell, LSTMCell, Linear, MLP, ParamSet, cat, glorot, gru_step, lstm_step
from .optim import AdamState, adam_from_arrays, adam_step, adam_to_arrays
from .losses import (
    bce_with_logits, cross_entropy, focal_loss, mixture_bernoulli_nll,
    mixture_bernoulli_nll_logits,
)
from .encoding import fourier_encode
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, numeric_grad
