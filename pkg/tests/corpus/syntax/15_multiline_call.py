result = compute(
    alpha,
    beta,
)