"""Synthetic interaction logs written in MovieLens-1M file format.

Users have sparse genre tastes and browse in genre-coherent streaks, so
windows of their history carry a recoverable favorite genre and item
co-occurrence reflects genre structure. Used for smoke runs and tests; it
is not a stand-in for real data when judging reported numbers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama",
    "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller",
    "War", "Western",
)
AGE_CODES = ("1", "18", "25", "35", "45", "50", "56")
N_OCCUPATIONS = 21


def write_movielens_like(
    out_dir,
    n_users: int = 600,
    n_items: int = 800,
    min_actions: int = 20,
    max_actions: int = 200,
    stickiness: float = 0.85,
    taste_concentration: float = 0.25,
    seed: int = 0,
) -> dict:
    """Write ``ratings.dat``, ``movies.dat`` and ``users.dat`` under ``out_dir``.

    Returns summary counts.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_genres = len(GENRES)

    genre_weight = 1.0 / np.arange(1, n_genres + 1) ** 0.8
    genre_weight = genre_weight[rng.permutation(n_genres)]
    genre_weight /= genre_weight.sum()
    primary = rng.choice(n_genres, size=n_items, p=genre_weight)
    item_genres = []
    for g in primary:
        extra = rng.choice(n_genres, size=rng.integers(0, 3), replace=False)
        item_genres.append(sorted({int(g), *map(int, extra)}))
    by_genre = [np.flatnonzero(primary == g) for g in range(n_genres)]
    popularity = rng.pareto(1.5, size=n_items) + 1.0

    with open(out / "movies.dat", "w", encoding="latin-1") as fh:
        for i in range(n_items):
            names = "|".join(GENRES[g] for g in item_genres[i])
            fh.write(f"{i + 1}::Synthetic Movie {i + 1} (2000)::{names}\n")

    ratings = []
    users = []
    for u in range(n_users):
        taste = rng.dirichlet(np.full(n_genres, taste_concentration)) * 0.7 + 0.3 * genre_weight
        n = int(rng.integers(min_actions, max_actions + 1))
        t = int(rng.integers(9.5e8, 1.0e9))
        g = int(rng.choice(n_genres, p=taste))
        for _ in range(n):
            if rng.random() > stickiness:
                g = int(rng.choice(n_genres, p=taste))
            pool = by_genre[g] if len(by_genre[g]) else np.arange(n_items)
            w = popularity[pool] / popularity[pool].sum()
            item = int(rng.choice(pool, p=w))
            t += int(rng.integers(1, 5000))
            ratings.append(f"{u + 1}::{item + 1}::{int(rng.integers(1, 6))}::{t}\n")
        top = int(np.argmax(taste))
        age = AGE_CODES[(top + int(rng.integers(0, 2))) % len(AGE_CODES)]
        occ = (top * 3 + int(rng.integers(0, 3))) % N_OCCUPATIONS
        gender = "MF"[int(rng.integers(0, 2))]
        users.append(f"{u + 1}::{gender}::{age}::{occ}::{10000 + u}\n")

    (out / "ratings.dat").write_text("".join(ratings), encoding="latin-1")
    (out / "users.dat").write_text("".join(users), encoding="latin-1")
    return {"n_users": n_users, "n_items": n_items, "n_ratings": len(ratings)}
