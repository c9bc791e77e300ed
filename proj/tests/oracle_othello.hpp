#pragma once

// Independent Othello rules oracle for cross-checking the bitboard engine.
// Deliberately naive: an 8x8 char grid and explicit ray walks, written from
// the rules ("place on an empty cell so that at least one opponent piece is
// sandwiched along a straight line; all sandwiched pieces flip; a player with
// no legal placement passes; the game ends when neither side can place").
// This file must stay independent of src/othello.cpp.

#include <array>
#include <cstdint>
#include <vector>

namespace oracle {

struct Pos {
    std::array<char, 64> grid{};  // '.', 'B', 'W'
    char mover = 'B';

    static Pos initial() {
        Pos p;
        p.grid.fill('.');
        // d4/e5 white, d5/e4 black; cell = 8*row + col, row 0 = rank 1
        p.grid[3 * 8 + 3] = 'W';
        p.grid[4 * 8 + 4] = 'W';
        p.grid[4 * 8 + 3] = 'B';
        p.grid[3 * 8 + 4] = 'B';
        p.mover = 'B';
        return p;
    }
};

inline char other(char c) { return c == 'B' ? 'W' : 'B'; }

inline bool move_would_flip(const Pos& p, int row, int col) {
    if (p.grid[row * 8 + col] != '.') return false;
    const char me = p.mover, opp = other(me);
    for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            int r = row + dr, c = col + dc, seen = 0;
            while (r >= 0 && r < 8 && c >= 0 && c < 8 && p.grid[r * 8 + c] == opp) {
                ++seen;
                r += dr;
                c += dc;
            }
            if (seen > 0 && r >= 0 && r < 8 && c >= 0 && c < 8 && p.grid[r * 8 + c] == me)
                return true;
        }
    }
    return false;
}

inline std::vector<int> legal_cells0(const Pos& p) {
    std::vector<int> cells;
    for (int row = 0; row < 8; ++row)
        for (int col = 0; col < 8; ++col)
            if (move_would_flip(p, row, col)) cells.push_back(row * 8 + col);
    return cells;
}

// Applies a legal move (0-based cell), flipping all sandwiched pieces, then
// hands the turn to the opponent unless they must pass.
inline Pos apply(const Pos& p, int cell0) {
    Pos q = p;
    const int row = cell0 / 8, col = cell0 % 8;
    const char me = p.mover, opp = other(me);
    q.grid[cell0] = me;
    for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            int r = row + dr, c = col + dc, seen = 0;
            while (r >= 0 && r < 8 && c >= 0 && c < 8 && q.grid[r * 8 + c] == opp) {
                ++seen;
                r += dr;
                c += dc;
            }
            if (seen > 0 && r >= 0 && r < 8 && c >= 0 && c < 8 && q.grid[r * 8 + c] == me) {
                r = row + dr;
                c = col + dc;
                for (int i = 0; i < seen; ++i) {
                    q.grid[r * 8 + c] = me;
                    r += dr;
                    c += dc;
                }
            }
        }
    }
    q.mover = opp;
    if (legal_cells0(q).empty()) {
        q.mover = me;  // pass
        if (legal_cells0(q).empty()) q.mover = opp;  // neither side can move
    }
    return q;
}

inline uint64_t perft(const Pos& p, int depth) {
    if (depth == 0) return 1;
    uint64_t total = 0;
    for (int cell : legal_cells0(p)) total += perft(apply(p, cell), depth - 1);
    return total;
}

}  // namespace oracle
