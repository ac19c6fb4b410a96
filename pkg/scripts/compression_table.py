"""Parameter counts and compression ratios across width multipliers."""

from mitodet.nn import build_network, param_count

GAMMAS = (1.0, 0.8, 0.6, 0.5, 0.25, 0.125, 0.0625)


def main():
    base = param_count(build_network(1.0))
    print(f"{'gamma':>7} {'params':>12} {'vs 1.0':>8} {'vs 10x1.0':>10}")
    for g in GAMMAS:
        n = param_count(build_network(g))
        print(f"{g:7.4f} {n:12,d} {base / n:8.2f} {10 * base / n:10.1f}")


if __name__ == "__main__":
    main()
