// ./lib/growl.js
exports = module.exports = growl;

var exec = require('child_process').exec
cmd = { pkg: "notify-send" };

function growl(msg, fn) {
  args = [cmd.pkg];
  args.push(quote(msg));
  exec(args.join(' '), function (err) {
    if (fn) fn(err);
  });
};

function quote(str) {
  return '"' + str.replace(/"/g, '\\"') + '"';
}
