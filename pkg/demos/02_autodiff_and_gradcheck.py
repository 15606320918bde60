"""Tour of the autodiff core: build a tiny conv net, train it a little, and
verify every gradient against central finite differences."""

import numpy as np

from cyclictrain.autodiff import (
    Tensor,
    add,
    conv2d,
    grad_check,
    matmul,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    sub,
)


def tiny_convnet_builder():
    rs = np.random.RandomState(7)
    params = {
        "conv/w": Tensor(rs.randn(3, 1, 3, 3) * 0.4, requires_grad=True),
        "conv/b": Tensor(rs.randn(3) * 0.1, requires_grad=True),
        "fc/w": Tensor(rs.randn(12, 2) * 0.4, requires_grad=True),
        "fc/b": Tensor(rs.randn(2) * 0.1, requires_grad=True),
    }
    x = rs.rand(4, 1, 8, 8)
    y = rs.randn(4, 2)

    def loss_fn():
        h = relu(add(conv2d(Tensor(x), params["conv/w"], padding=1),
                     reshape(params["conv/b"], (1, 3, 1, 1))))
        h = maxpool2d(h, 4)  # (4,3,2,2)
        flat = reshape(h, (4, 12))
        out = add(matmul(flat, params["fc/w"]), params["fc/b"])
        d = sub(out, Tensor(y))
        return mean(mul(d, d))

    return params, loss_fn


def main():
    # a scalar chain rule, by hand: d/dx (x*x) at 3 is 6
    x = Tensor(3.0, requires_grad=True)
    mul(x, x).backward()
    print(f"d(x*x)/dx at x=3: {float(x.grad)}")

    # a few steps of plain gradient descent on the tiny convnet
    params, loss_fn = tiny_convnet_builder()
    print(f"initial loss: {loss_fn().item():.4f}")
    for _ in range(60):
        loss = loss_fn()
        for t in params.values():
            t.grad = None
        loss.backward()
        for t in params.values():
            t.data -= 0.1 * t.grad
    print(f"after 60 gradient steps: {loss_fn().item():.4f}")

    # every parameter's gradient agrees with finite differences
    report = grad_check(tiny_convnet_builder, tolerance=1e-4)
    print(report.summary())
    print(f"gradient check passed: {report.passed}")

    # freezing removes a parameter from the checked set
    def frozen_builder():
        params, loss_fn = tiny_convnet_builder()
        params["conv/b"].requires_grad = False
        return params, loss_fn

    report = grad_check(frozen_builder)
    print(f"with conv/b frozen, checked: {sorted(report.errors)}, "
          f"frozen: {report.frozen}")


if __name__ == "__main__":
    main()
