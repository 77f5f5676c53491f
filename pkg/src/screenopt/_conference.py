# Conference matrices (zero diagonal, +-1 elsewhere, C'C = (m-1)I).
# Orders 6 and 10 are symmetric Paley matrices (GF(5), GF(9));
# orders 8 and 12 are skew Paley matrices (GF(7), GF(11)).

CONFERENCE = {
    6: [
        [0, 1, 1, 1, 1, 1],
        [1, 0, 1, -1, -1, 1],
        [1, 1, 0, 1, -1, -1],
        [1, -1, 1, 0, 1, -1],
        [1, -1, -1, 1, 0, 1],
        [1, 1, -1, -1, 1, 0],
    ],
    8: [
        [0, 1, 1, 1, 1, 1, 1, 1],
        [-1, 0, 1, 1, -1, 1, -1, -1],
        [-1, -1, 0, 1, 1, -1, 1, -1],
        [-1, -1, -1, 0, 1, 1, -1, 1],
        [-1, 1, -1, -1, 0, 1, 1, -1],
        [-1, -1, 1, -1, -1, 0, 1, 1],
        [-1, 1, -1, 1, -1, -1, 0, 1],
        [-1, 1, 1, -1, 1, -1, -1, 0],
    ],
    10: [
        [0, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        [1, 0, 1, 1, 1, -1, -1, 1, -1, -1],
        [1, 1, 0, 1, -1, 1, -1, -1, 1, -1],
        [1, 1, 1, 0, -1, -1, 1, -1, -1, 1],
        [1, 1, -1, -1, 0, 1, 1, 1, -1, -1],
        [1, -1, 1, -1, 1, 0, 1, -1, 1, -1],
        [1, -1, -1, 1, 1, 1, 0, -1, -1, 1],
        [1, 1, -1, -1, 1, -1, -1, 0, 1, 1],
        [1, -1, 1, -1, -1, 1, -1, 1, 0, 1],
        [1, -1, -1, 1, -1, -1, 1, 1, 1, 0],
    ],
    12: [
        [0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        [-1, 0, 1, -1, 1, 1, 1, -1, -1, -1, 1, -1],
        [-1, -1, 0, 1, -1, 1, 1, 1, -1, -1, -1, 1],
        [-1, 1, -1, 0, 1, -1, 1, 1, 1, -1, -1, -1],
        [-1, -1, 1, -1, 0, 1, -1, 1, 1, 1, -1, -1],
        [-1, -1, -1, 1, -1, 0, 1, -1, 1, 1, 1, -1],
        [-1, -1, -1, -1, 1, -1, 0, 1, -1, 1, 1, 1],
        [-1, 1, -1, -1, -1, 1, -1, 0, 1, -1, 1, 1],
        [-1, 1, 1, -1, -1, -1, 1, -1, 0, 1, -1, 1],
        [-1, 1, 1, 1, -1, -1, -1, 1, -1, 0, 1, -1],
        [-1, -1, 1, 1, 1, -1, -1, -1, 1, -1, 0, 1],
        [-1, 1, -1, 1, 1, 1, -1, -1, -1, 1, -1, 0],
    ],
}
