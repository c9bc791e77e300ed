#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mothello::othello {

enum class Player : uint8_t { Black, White };
enum class Tile : uint8_t { Empty, Black, White };

inline Player opponent(Player p) { return p == Player::Black ? Player::White : Player::Black; }

// Cell numbering: cell = 8*row + col + 1, row 0 = rank "1", col 0 = file "a",
// so a1 = 1, h1 = 8, a8 = 57, h8 = 64. Move sequences in logs and corpora use
// this 1-based encoding; bit i of a bitboard is cell i+1.
struct Move {
    int cell = 0;  // 1..64

    static Move from_index(int idx0) { return Move{idx0 + 1}; }
    int index() const { return cell - 1; }
    auto operator<=>(const Move&) const = default;
};

std::string cell_name(Move m);        // "d3"
Move move_from_name(const std::string& name);

struct IllegalMove : std::runtime_error {
    IllegalMove(int cell, int index_in_sequence)
        : std::runtime_error("illegal move: cell " + std::to_string(cell) +
                             (index_in_sequence >= 0
                                  ? " at sequence index " + std::to_string(index_in_sequence)
                                  : std::string{})),
          cell(cell),
          index_in_sequence(index_in_sequence) {}
    int cell;
    int index_in_sequence;  // -1 when not part of a sequence
};

struct Board {
    uint64_t black = 0;
    uint64_t white = 0;
    Player to_move = Player::Black;

    // Standard opening: White on d4/e5, Black on d5/e4, Black to move.
    static Board initial();

    uint64_t occupied() const { return black | white; }
    uint64_t pieces(Player p) const { return p == Player::Black ? black : white; }
    Tile tile(int idx0) const {
        const uint64_t bit = 1ULL << idx0;
        if (black & bit) return Tile::Black;
        if (white & bit) return Tile::White;
        return Tile::Empty;
    }
    int count(Player p) const;
    bool operator==(const Board&) const = default;
};

struct GameRecord {
    std::vector<Move> moves;
    bool operator==(const GameRecord&) const = default;
};

struct BoardTrace {
    std::vector<Board> boards;  // boards[i] = state after the first i moves
};

// Bitmask of legal placements for b.to_move (empty cells that flank >= 1
// opponent piece along some ray).
uint64_t legal_mask(const Board& b);
std::vector<Move> legal_moves(const Board& b);

bool is_terminal(const Board& b);

// Pure: returns the successor board. Throws IllegalMove if m is not legal.
// If the opponent then has no legal move but the mover does, the turn passes
// silently (to_move stays with the mover).
Board apply_move(const Board& b, Move m);

// Trace of |moves|+1 boards. Throws IllegalMove carrying the first offending index.
BoardTrace simulate(const GameRecord& game);

// Complete random game: uniform over legal moves each turn, silent pass,
// played until neither side can move. Deterministic per seed.
GameRecord generate_game(uint64_t seed);

// Number of distinct legal move sequences of exactly `depth` placements from
// the initial position (passes are not placements).
uint64_t perft(int depth);

}  // namespace mothello::othello
