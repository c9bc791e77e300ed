#include "mothello/othello.hpp"

#include <bit>

#include "mothello/rng.hpp"

namespace mothello::othello {

namespace {

constexpr uint64_t kNotFileA = 0xfefefefefefefefeULL;  // col 0 cleared
constexpr uint64_t kNotFileH = 0x7f7f7f7f7f7f7f7fULL;  // col 7 cleared

inline uint64_t shift_e(uint64_t b) { return (b << 1) & kNotFileA; }
inline uint64_t shift_w(uint64_t b) { return (b >> 1) & kNotFileH; }
inline uint64_t shift_n(uint64_t b) { return b >> 8; }
inline uint64_t shift_s(uint64_t b) { return b << 8; }
inline uint64_t shift_ne(uint64_t b) { return (b >> 7) & kNotFileA; }
inline uint64_t shift_nw(uint64_t b) { return (b >> 9) & kNotFileH; }
inline uint64_t shift_se(uint64_t b) { return (b << 9) & kNotFileA; }
inline uint64_t shift_sw(uint64_t b) { return (b << 7) & kNotFileH; }

using ShiftFn = uint64_t (*)(uint64_t);
constexpr ShiftFn kShifts[8] = {shift_e, shift_w, shift_n, shift_s,
                                shift_ne, shift_nw, shift_se, shift_sw};

uint64_t legal_mask_for(uint64_t own, uint64_t opp) {
    const uint64_t empty = ~(own | opp);
    uint64_t legal = 0;
    for (ShiftFn shift : kShifts) {
        uint64_t t = shift(own) & opp;
        t |= shift(t) & opp;
        t |= shift(t) & opp;
        t |= shift(t) & opp;
        t |= shift(t) & opp;
        t |= shift(t) & opp;
        legal |= shift(t) & empty;
    }
    return legal;
}

uint64_t flips_for(uint64_t own, uint64_t opp, int sq) {
    const uint64_t mv = 1ULL << sq;
    uint64_t flips = 0;
    for (ShiftFn shift : kShifts) {
        uint64_t ray = 0;
        uint64_t cur = shift(mv);
        while (cur & opp) {
            ray |= cur;
            cur = shift(cur);
        }
        if (cur & own) flips |= ray;
    }
    return flips;
}

}  // namespace

std::string cell_name(Move m) {
    const int idx = m.index();
    std::string s;
    s += static_cast<char>('a' + idx % 8);
    s += static_cast<char>('1' + idx / 8);
    return s;
}

Move move_from_name(const std::string& name) {
    if (name.size() != 2 || name[0] < 'a' || name[0] > 'h' || name[1] < '1' || name[1] > '8')
        throw std::invalid_argument("bad cell name: " + name);
    return Move::from_index((name[1] - '1') * 8 + (name[0] - 'a'));
}

Board Board::initial() {
    Board b;
    b.white = (1ULL << move_from_name("d4").index()) | (1ULL << move_from_name("e5").index());
    b.black = (1ULL << move_from_name("d5").index()) | (1ULL << move_from_name("e4").index());
    b.to_move = Player::Black;
    return b;
}

int Board::count(Player p) const { return std::popcount(pieces(p)); }

uint64_t legal_mask(const Board& b) {
    const uint64_t own = b.pieces(b.to_move);
    const uint64_t opp = b.pieces(opponent(b.to_move));
    return legal_mask_for(own, opp);
}

std::vector<Move> legal_moves(const Board& b) {
    std::vector<Move> moves;
    uint64_t mask = legal_mask(b);
    while (mask) {
        const int sq = std::countr_zero(mask);
        moves.push_back(Move::from_index(sq));
        mask &= mask - 1;
    }
    return moves;
}

bool is_terminal(const Board& b) {
    if (legal_mask(b)) return false;
    Board swapped = b;
    swapped.to_move = opponent(b.to_move);
    return legal_mask(swapped) == 0;
}

Board apply_move(const Board& b, Move m) {
    const int sq = m.index();
    if (sq < 0 || sq >= 64 || !(legal_mask(b) & (1ULL << sq))) throw IllegalMove(m.cell, -1);

    const Player mover = b.to_move;
    uint64_t own = b.pieces(mover);
    uint64_t opp = b.pieces(opponent(mover));
    const uint64_t flips = flips_for(own, opp, sq);
    own |= flips | (1ULL << sq);
    opp &= ~flips;

    Board next;
    next.black = mover == Player::Black ? own : opp;
    next.white = mover == Player::White ? own : opp;
    next.to_move = opponent(mover);
    if (legal_mask(next) == 0) {
        Board stay = next;
        stay.to_move = mover;
        if (legal_mask(stay) != 0) return stay;  // opponent passes
    }
    return next;
}

BoardTrace simulate(const GameRecord& game) {
    BoardTrace trace;
    trace.boards.reserve(game.moves.size() + 1);
    trace.boards.push_back(Board::initial());
    for (size_t i = 0; i < game.moves.size(); ++i) {
        try {
            trace.boards.push_back(apply_move(trace.boards.back(), game.moves[i]));
        } catch (const IllegalMove&) {
            throw IllegalMove(game.moves[i].cell, static_cast<int>(i));
        }
    }
    return trace;
}

GameRecord generate_game(uint64_t seed) {
    Rng rng(seed);
    GameRecord game;
    Board b = Board::initial();
    for (;;) {
        uint64_t mask = legal_mask(b);
        if (!mask) break;  // apply_move pass rule guarantees this means terminal
        const int n = std::popcount(mask);
        int k = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
        while (k--) mask &= mask - 1;
        const Move m = Move::from_index(std::countr_zero(mask));
        b = apply_move(b, m);
        game.moves.push_back(m);
    }
    return game;
}

namespace {

uint64_t perft_rec(const Board& b, int depth) {
    if (depth == 0) return 1;
    uint64_t mask = legal_mask(b);
    uint64_t total = 0;
    while (mask) {
        const int sq = std::countr_zero(mask);
        mask &= mask - 1;
        total += perft_rec(apply_move(b, Move::from_index(sq)), depth - 1);
    }
    return total;
}

}  // namespace

uint64_t perft(int depth) { return perft_rec(Board::initial(), depth); }

}  // namespace mothello::othello
