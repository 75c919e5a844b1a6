from .functional import (
    channel_linear_backward,
    channel_linear_forward,
    conv1d_backward,
    conv1d_forward,
    conv1d_out_len,
    elu_backward,
    elu_forward,
    prelu_backward,
    prelu_forward,
    tconv1d_backward,
    tconv1d_forward,
    tconv1d_out_len,
)
from .layers import (
    EDGE_DTYPE,
    ELU,
    TRAIN_DTYPE,
    ChannelLinear,
    Conv1d,
    ConvTranspose1d,
    LayerSpec,
    MeanOverTime,
    Module,
    PReLU,
    ResidualUnit,
    Sequential,
    infer_shapes,
    round_half,
)
from .serialize import dumps, load_weights, loads, save_weights
