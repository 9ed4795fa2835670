//! Pointwise activations. Backward functions take the forward input
//! (leaky ReLU, ReLU) or the forward output (tanh).

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect()
}

pub fn leaky_relu_backward(x: &[f64], dy: &[f64], slope: f64) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    leaky_relu(x, 0.0)
}

pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    leaky_relu_backward(x, dy, 0.0)
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

pub fn tanh_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(&t, &g)| g * (1.0 - t * t)).collect()
}
