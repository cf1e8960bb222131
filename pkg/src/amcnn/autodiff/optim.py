import numpy as np


def adam_step(params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam update to each parameter, then zero its gradient.

    Moment buffers and the step counter live on each :class:`Parameter`, so a
    parameter set can be checkpointed or split between stages freely.
    """
    for p in params:
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def grad_norm(params):
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
